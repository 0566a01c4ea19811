//! Trace encoder: turns retirement blocks into trace packets.
//!
//! Blocks are buffered for one cycle so that every decision can see the block
//! that follows (its `iaddr` is the target of an uninferable jump or the
//! handler of a trap). Lanes within a cycle are processed in order.
//!
//! Address semantics, as the decoder expects them:
//!
//! * `SyncStart` gives the address of the next instruction to retire.
//! * An address report (`AddrOnly`, or a branch map with a delta) on its own
//!   is the target of the uninferable transfer the decoder is walking toward.
//! * After a `Trap`, the next address report is the trap point (first
//!   instruction not retired); execution then resumes at the handler.
//! * After `Support` (ended or resync close), the next address report, when
//!   present, is the last retired instruction. It is omitted when nothing
//!   retired since the last resume point.

pub mod branch_map;
pub mod config;
pub mod resync;

use std::collections::VecDeque;

use thiserror::Error;

use crate::instruction::{IType, RetirementBlock};
use crate::packet::{QualStatus, TracePacket};

pub use self::branch_map::{BranchMapState, MapFull};
pub use self::config::{qualify, ConfigError, EncoderConfig, ResyncMode};
pub use self::resync::{ResyncEvent, ResyncState};

/// Packets a block can emit after its sync (trap, full map, stop report) plus
/// a close (support, full map, stop report).
const RESYNC_RESERVE: u64 = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("cycle {cycle} is not after the previous cycle")]
    NonMonotonicCycle { cycle: u64 },
    #[error("cycle {cycle} lane {lane}: {reason}")]
    InvariantViolation { cycle: u64, lane: u32, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PacketRequest {
    NoPacket,
    SyncStart,
    Trap,
    FullBranchMap,
    AddressReport,
    ResyncClose,
    SupportEnd,
}

/// A packet plus the index (in processing order) of the block that caused it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Emitted {
    pub block: usize,
    pub packet: TracePacket,
}

#[derive(Copy, Clone, Debug, Default)]
struct BlockProgress {
    begun: bool,
    branch_recorded: bool,
    trap_done: bool,
    target_done: bool,
    closed: bool,
    ended: bool,
}

#[derive(Clone, Debug)]
struct CycleSlot {
    blocks: Vec<RetirementBlock>,
    first_index: usize,
    processed: bool,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    /// Previous, current and next cycle.
    window: VecDeque<CycleSlot>,
    last_cycle: Option<u64>,
    blocks_pushed: usize,
    started: bool,
    sync_owed: bool,
    /// Nothing retired since the last point the decoder can resume from.
    fresh: bool,
    last_reported_addr: u64,
    last_retired_addr: u64,
    branch_map: BranchMapState,
    resync: ResyncState,
    progress: BlockProgress,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self, EncodeError> {
        config.validate()?;
        let resync = ResyncState::new(config.resync_mode, config.resync_threshold);
        Ok(Self {
            config,
            window: VecDeque::with_capacity(3),
            last_cycle: None,
            blocks_pushed: 0,
            started: false,
            sync_owed: false,
            fresh: true,
            last_reported_addr: 0,
            last_retired_addr: 0,
            branch_map: BranchMapState::default(),
            resync,
            progress: BlockProgress::default(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn started(&self) -> bool {
        self.started
    }

    pub fn branch_map(&self) -> &BranchMapState {
        &self.branch_map
    }

    pub fn resync(&self) -> &ResyncState {
        &self.resync
    }

    pub fn last_reported_addr(&self) -> u64 {
        self.last_reported_addr
    }

    pub fn record_branch(&mut self, taken: bool) -> Result<(), MapFull> {
        self.branch_map.record_branch(taken)
    }

    /// Forgets all trace state after the transport dropped a packet; the next
    /// qualified block starts over with a sync.
    pub fn notify_loss(&mut self) {
        self.started = false;
        self.sync_owed = false;
        self.fresh = true;
        self.branch_map.take();
    }

    /// Highest-priority request for `block` as the first decision taken on it.
    pub fn priority_decide(
        &self,
        block: &RetirementBlock,
        next: Option<&RetirementBlock>,
    ) -> PacketRequest {
        let progress = BlockProgress {
            begun: true,
            ..BlockProgress::default()
        };
        self.decide(block, next, &progress)
    }

    fn resync_due(&self) -> bool {
        self.resync.pending
            || (self.config.resync_mode == ResyncMode::PacketCount
                && self.resync.counter + RESYNC_RESERVE > self.config.resync_threshold)
    }

    fn decide(
        &self,
        block: &RetirementBlock,
        next: Option<&RetirementBlock>,
        p: &BlockProgress,
    ) -> PacketRequest {
        if p.closed || p.ended {
            return PacketRequest::NoPacket;
        }
        if !self.started || self.sync_owed {
            return PacketRequest::SyncStart;
        }
        if block.itype.is_trap() && !p.trap_done && next.is_some() {
            return PacketRequest::Trap;
        }
        if block.itype.branch_taken().is_some() && !p.branch_recorded && self.branch_map.is_full()
        {
            return PacketRequest::FullBranchMap;
        }
        if block.itype.is_uninferable() && !p.target_done && next.is_some() {
            return PacketRequest::AddressReport;
        }
        if let Some(next) = next {
            let next_traced = qualify(next, &self.config);
            if next_traced && !p.closed && self.resync_due() {
                return PacketRequest::ResyncClose;
            }
            if !next_traced && !p.ended {
                return PacketRequest::SupportEnd;
            }
        }
        PacketRequest::NoPacket
    }

    /// Pushes one cycle of blocks and returns the packets for the cycle that
    /// became decidable.
    pub fn step(&mut self, cycle_blocks: &[RetirementBlock]) -> Result<Vec<TracePacket>, EncodeError> {
        Ok(self
            .step_tagged(cycle_blocks)?
            .into_iter()
            .map(|e| e.packet)
            .collect())
    }

    pub fn step_tagged(
        &mut self,
        cycle_blocks: &[RetirementBlock],
    ) -> Result<Vec<Emitted>, EncodeError> {
        if !cycle_blocks.is_empty() {
            self.check_cycle(cycle_blocks)?;
        }
        self.resync.tick(ResyncEvent::CycleElapsed);
        if cycle_blocks.is_empty() {
            return Ok(Vec::new());
        }
        self.last_cycle = Some(cycle_blocks[0].cycle);
        self.window.push_back(CycleSlot {
            blocks: cycle_blocks.to_vec(),
            first_index: self.blocks_pushed,
            processed: false,
        });
        self.blocks_pushed += cycle_blocks.len();

        let mut out = Vec::new();
        let pending = self.window.iter().position(|c| !c.processed);
        if let Some(idx) = pending.filter(|&i| i + 1 < self.window.len()) {
            self.process_cycle(idx, &mut out);
        }
        while self.window.len() > 3 {
            self.window.pop_front();
        }
        Ok(out)
    }

    /// Drains the window and closes the trace.
    pub fn flush(&mut self) -> Vec<TracePacket> {
        self.flush_tagged().into_iter().map(|e| e.packet).collect()
    }

    pub fn flush_tagged(&mut self) -> Vec<Emitted> {
        let mut out = Vec::new();
        while let Some(idx) = self.window.iter().position(|c| !c.processed) {
            self.process_cycle(idx, &mut out);
        }
        if self.started {
            let index = self.blocks_pushed.saturating_sub(1);
            self.end_trace(index, &mut out);
        }
        self.window.clear();
        out
    }

    fn check_cycle(&self, blocks: &[RetirementBlock]) -> Result<(), EncodeError> {
        let cycle = blocks[0].cycle;
        if self.last_cycle.is_some_and(|last| cycle <= last) {
            return Err(EncodeError::NonMonotonicCycle { cycle });
        }
        let mut prev_lane = None;
        for b in blocks {
            let violation = |reason: String| EncodeError::InvariantViolation {
                cycle: b.cycle,
                lane: b.lane,
                reason,
            };
            if b.cycle != cycle {
                return Err(violation(format!("expected cycle {cycle}")));
            }
            if b.lane >= self.config.lanes {
                return Err(violation(format!("only {} lanes configured", self.config.lanes)));
            }
            if prev_lane.is_some_and(|p| b.lane <= p) {
                return Err(violation("lanes out of order or repeated".into()));
            }
            prev_lane = Some(b.lane);
            b.validate().map_err(violation)?;
        }
        Ok(())
    }

    fn process_cycle(&mut self, idx: usize, out: &mut Vec<Emitted>) {
        let slot = self.window[idx].clone();
        let following = self.window.get(idx + 1).map(|c| c.blocks[0]);
        for (lane, block) in slot.blocks.iter().enumerate() {
            let next = slot.blocks.get(lane + 1).copied().or(following);
            self.process_block(slot.first_index + lane, block, next.as_ref(), out);
        }
        self.window[idx].processed = true;
    }

    fn process_block(
        &mut self,
        index: usize,
        block: &RetirementBlock,
        next: Option<&RetirementBlock>,
        out: &mut Vec<Emitted>,
    ) {
        self.progress = BlockProgress::default();
        if !qualify(block, &self.config) {
            return;
        }
        loop {
            if self.started && !self.sync_owed && !self.progress.begun {
                self.begin_block(block);
            }
            let progress = self.progress;
            match self.decide(block, next, &progress) {
                PacketRequest::NoPacket => break,
                req => self.materialize(req, index, block, next, out),
            }
        }
    }

    fn begin_block(&mut self, block: &RetirementBlock) {
        if let Some(last) = block.last_addr() {
            self.fresh = false;
            self.last_retired_addr = last;
        }
        if let Some(taken) = block.itype.branch_taken() {
            if self.branch_map.record_branch(taken).is_ok() {
                self.progress.branch_recorded = true;
            }
        }
        self.progress.begun = true;
    }

    fn materialize(
        &mut self,
        req: PacketRequest,
        index: usize,
        block: &RetirementBlock,
        next: Option<&RetirementBlock>,
        out: &mut Vec<Emitted>,
    ) {
        match req {
            PacketRequest::NoPacket => {}
            PacketRequest::SyncStart => {
                debug_assert!(self.branch_map.is_empty());
                self.emit(
                    index,
                    TracePacket::SyncStart {
                        privilege: block.privilege,
                        address: block.iaddr,
                    },
                    out,
                );
                self.last_reported_addr = block.iaddr;
                self.started = true;
                self.sync_owed = false;
                self.fresh = true;
            }
            PacketRequest::Trap => {
                let handler = next.expect("trap decided without a following block");
                self.flush_full_map(index, out);
                self.emit(
                    index,
                    TracePacket::Trap {
                        interrupt: block.itype == IType::Interrupt,
                        privilege: handler.privilege,
                        cause: block.cause,
                        tval: block.tval,
                        handler: handler.iaddr,
                    },
                    out,
                );
                self.last_reported_addr = handler.iaddr;
                self.report_address(index, block.end_addr(), out);
                self.fresh = true;
                self.progress.trap_done = true;
            }
            PacketRequest::FullBranchMap => {
                self.emit_full_map(index, out);
                let taken = block.itype.branch_taken().unwrap_or(true);
                self.branch_map
                    .record_branch(taken)
                    .expect("map was just emptied");
                self.progress.branch_recorded = true;
            }
            PacketRequest::AddressReport => {
                let target = next.expect("address report decided without a following block");
                self.report_address(index, target.iaddr, out);
                self.fresh = true;
                self.progress.target_done = true;
            }
            PacketRequest::ResyncClose => {
                if !self.fresh {
                    self.flush_full_map(index, out);
                    self.emit(
                        index,
                        TracePacket::Support {
                            enabled: self.config.enabled,
                            qual_status: QualStatus::NoChange,
                        },
                        out,
                    );
                    self.report_address(index, self.last_retired_addr, out);
                }
                self.sync_owed = true;
                self.progress.closed = true;
            }
            PacketRequest::SupportEnd => {
                self.end_trace(index, out);
                self.progress.ended = true;
            }
        }
    }

    fn end_trace(&mut self, index: usize, out: &mut Vec<Emitted>) {
        self.flush_full_map(index, out);
        self.emit(
            index,
            TracePacket::Support {
                enabled: self.config.enabled,
                qual_status: QualStatus::EndedReported,
            },
            out,
        );
        if !self.fresh {
            self.report_address(index, self.last_retired_addr, out);
        }
        self.started = false;
        self.sync_owed = false;
        self.fresh = true;
    }

    fn emit_full_map(&mut self, index: usize, out: &mut Vec<Emitted>) {
        let branches = self.branch_map.take();
        self.emit(
            index,
            TracePacket::BranchMap {
                branches,
                delta: None,
            },
            out,
        );
    }

    /// A full map goes out ahead of a trap or support packet so that the
    /// decoder consumes it while still tracing.
    fn flush_full_map(&mut self, index: usize, out: &mut Vec<Emitted>) {
        if self.branch_map.is_full() {
            self.emit_full_map(index, out);
        }
    }

    /// Emits `addr` relative to the last reported address, carrying any
    /// recorded branches with it.
    fn report_address(&mut self, index: usize, addr: u64, out: &mut Vec<Emitted>) {
        if self.branch_map.is_full() {
            self.emit_full_map(index, out);
        }
        let delta = addr.wrapping_sub(self.last_reported_addr) as i64;
        let packet = if self.branch_map.is_empty() {
            TracePacket::AddrOnly { delta }
        } else {
            TracePacket::BranchMap {
                branches: self.branch_map.take(),
                delta: Some(delta),
            }
        };
        self.emit(index, packet, out);
        self.last_reported_addr = addr;
    }

    fn emit(&mut self, block: usize, packet: TracePacket, out: &mut Vec<Emitted>) {
        out.push(Emitted { block, packet });
        self.resync.tick(ResyncEvent::PacketEmitted);
        if matches!(packet, TracePacket::SyncStart { .. }) {
            self.resync.reset();
        }
    }
}

/// Groups a block stream into cycles.
pub fn cycles(blocks: &[RetirementBlock]) -> impl Iterator<Item = &[RetirementBlock]> {
    blocks.chunk_by(|a, b| a.cycle == b.cycle)
}

/// Runs a whole block stream through a fresh encoder.
pub fn encode_blocks(
    config: &EncoderConfig,
    blocks: &[RetirementBlock],
) -> Result<Vec<TracePacket>, EncodeError> {
    let mut encoder = Encoder::new(config.clone())?;
    let mut packets = Vec::new();
    for cycle in cycles(blocks) {
        packets.extend(encoder.step(cycle)?);
    }
    packets.extend(encoder.flush());
    Ok(packets)
}
