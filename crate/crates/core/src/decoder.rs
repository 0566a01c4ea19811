//! Rebuilds the retired PC sequence from packets and an instruction map.
//!
//! PCs are only emitted once the packet stream proves they retired: branch
//! bits confirm the path up to the branch they describe, and address reports
//! confirm the path up to the transfer or stop point they name. See the
//! encoder module for what each address means.

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::instruction::{InstructionKind, InstructionMap};
use crate::packet::{QualStatus, TracePacket};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("no instruction at {0:#x}")]
    UnknownAddress(u64),
    #[error("decoder out of step with the trace at {pc:#x}: {reason}")]
    DesyncDetected { pc: u64, reason: &'static str },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("packet {index}: {source}")]
pub struct StreamError {
    pub index: usize,
    pub source: DecodeError,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Phase {
    Idle,
    Tracing,
    /// A trap was reported; the next address is where it was taken.
    AwaitTrapPoint { handler: u64 },
    /// Trace ended or is being closed for a resync; the next address, if
    /// any, is the last retired instruction.
    AwaitStop { close: bool },
    /// Closed for a resync; only a sync may follow.
    Closed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderState {
    /// Next instruction to retire on the reconstructed path.
    pub pc: u64,
    pub last_reported_addr: u64,
    pub pending_branch_bits: VecDeque<bool>,
    pub trace_lost: bool,
    phase: Phase,
    /// Most recent PC emitted since the last resume point.
    last_emitted: Option<u64>,
}

impl Default for DecoderState {
    fn default() -> Self {
        Self {
            pc: 0,
            last_reported_addr: 0,
            pending_branch_bits: VecDeque::new(),
            trace_lost: false,
            phase: Phase::Idle,
            last_emitted: None,
        }
    }
}

impl DecoderState {
    pub fn active(&self) -> bool {
        !matches!(self.phase, Phase::Idle | Phase::Closed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeReport {
    pub packets: usize,
    pub pcs: usize,
    /// Sync packets that (re)started tracing.
    pub syncs: usize,
    /// Periodic syncs seen while already tracing.
    pub resyncs: usize,
    pub loss_events: usize,
    pub branch_bits: usize,
    pub unconsumed_bits: usize,
    /// PC count at each sync packet, in stream order.
    pub sync_marks: Vec<usize>,
}

impl fmt::Display for DecodeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "packets={}", self.packets)?;
        writeln!(f, "pcs={}", self.pcs)?;
        writeln!(f, "syncs={}", self.syncs)?;
        writeln!(f, "resyncs={}", self.resyncs)?;
        writeln!(f, "loss_events={}", self.loss_events)?;
        writeln!(f, "branch_bits={}", self.branch_bits)?;
        writeln!(f, "unconsumed_bits={}", self.unconsumed_bits)
    }
}

enum Step {
    Advanced,
    NeedBit,
    Uninferable,
}

pub struct Decoder<'m> {
    map: &'m InstructionMap,
    state: DecoderState,
    report: DecodeReport,
}

impl<'m> Decoder<'m> {
    pub fn new(map: &'m InstructionMap) -> Self {
        Self {
            map,
            state: DecoderState::default(),
            report: DecodeReport::default(),
        }
    }

    pub fn state(&self) -> &DecoderState {
        &self.state
    }

    pub fn report(&self) -> &DecodeReport {
        &self.report
    }

    pub fn finish(mut self) -> DecodeReport {
        self.report.unconsumed_bits = self.state.pending_branch_bits.len();
        self.report
    }

    fn desync(&self, reason: &'static str) -> DecodeError {
        DecodeError::DesyncDetected {
            pc: self.state.pc,
            reason,
        }
    }

    fn jump(&mut self, addr: u64) -> Result<(), DecodeError> {
        if !self.map.contains(addr) {
            return Err(DecodeError::UnknownAddress(addr));
        }
        self.state.pc = addr;
        self.state.last_emitted = None;
        Ok(())
    }

    /// Retires the instruction at `pc` if the known information allows it.
    fn step(&mut self, out: &mut Vec<u64>) -> Result<Step, DecodeError> {
        let pc = self.state.pc;
        let insn = self.map.get(pc).ok_or(DecodeError::UnknownAddress(pc))?;
        let fallthrough = pc.wrapping_add(u64::from(insn.size));
        self.state.pc = match insn.kind {
            InstructionKind::Sequential => fallthrough,
            InstructionKind::Branch(target) => match self.state.pending_branch_bits.pop_front() {
                Some(true) => target,
                Some(false) => fallthrough,
                None => return Ok(Step::NeedBit),
            },
            InstructionKind::InferableJump(target) | InstructionKind::Call(target) => target,
            _ => return Ok(Step::Uninferable),
        };
        out.push(pc);
        self.state.last_emitted = Some(pc);
        Ok(Step::Advanced)
    }

    /// Without branches the path is fixed, so revisiting more instructions
    /// than the map holds means the walk cannot end.
    fn walk_limit(&self) -> usize {
        self.map.len() + 1
    }

    /// Consumes every queued branch bit.
    fn walk_bits(&mut self, out: &mut Vec<u64>) -> Result<(), DecodeError> {
        let mut idle = 0;
        while !self.state.pending_branch_bits.is_empty() {
            let before = self.state.pending_branch_bits.len();
            match self.step(out)? {
                Step::Advanced => {}
                Step::NeedBit => unreachable!("bits are pending"),
                Step::Uninferable => {
                    return Err(self.desync("uninferable transfer while branch bits remain"))
                }
            }
            idle = if self.state.pending_branch_bits.len() == before { idle + 1 } else { 0 };
            if idle > self.walk_limit() {
                return Err(self.desync("no branch reachable for pending bits"));
            }
        }
        Ok(())
    }

    /// Walks to the next uninferable transfer, retires it, and continues at
    /// `target`.
    fn walk_to_target(&mut self, target: u64, out: &mut Vec<u64>) -> Result<(), DecodeError> {
        self.walk_bits(out)?;
        for _ in 0..=self.walk_limit() {
            match self.step(out)? {
                Step::Advanced => {}
                Step::NeedBit => return Err(self.desync("branch outcome missing before target")),
                Step::Uninferable => {
                    out.push(self.state.pc);
                    return self.jump(target);
                }
            }
        }
        Err(self.desync("no uninferable transfer on the path"))
    }

    /// Walks until `pc == stop` with no branch bits left; `stop` is not
    /// retired.
    fn walk_until(&mut self, stop: u64, out: &mut Vec<u64>) -> Result<(), DecodeError> {
        self.walk_bits(out)?;
        for _ in 0..=self.walk_limit() {
            if self.state.pc == stop {
                return Ok(());
            }
            match self.step(out)? {
                Step::Advanced => {}
                Step::NeedBit => return Err(self.desync("branch outcome missing before trap")),
                Step::Uninferable => return Err(self.desync("trap point lies past an uninferable transfer")),
            }
        }
        Err(self.desync("trap point not on the path"))
    }

    /// Walks until the instruction at `last` has retired.
    fn walk_through(&mut self, last: u64, out: &mut Vec<u64>) -> Result<(), DecodeError> {
        // A full map may already have walked through `last`. With no bits
        // left the path cannot come back to it, since it is then a branch.
        if self.state.pending_branch_bits.is_empty() && self.state.last_emitted == Some(last) {
            return Ok(());
        }
        // Bits may belong to the final instruction itself, so step manually
        // until the queue drains, then on to `last`.
        let mut idle = 0;
        loop {
            let at = self.state.pc;
            let before = self.state.pending_branch_bits.len();
            match self.step(out)? {
                Step::Advanced => {}
                Step::NeedBit => return Err(self.desync("branch outcome missing before end")),
                Step::Uninferable if at == last && before == 0 => {
                    out.push(at);
                    self.state.last_emitted = Some(at);
                    return Ok(());
                }
                Step::Uninferable => return Err(self.desync("end point lies past an uninferable transfer")),
            }
            if at == last && self.state.pending_branch_bits.is_empty() {
                return Ok(());
            }
            idle = if self.state.pending_branch_bits.len() == before { idle + 1 } else { 0 };
            if idle > self.walk_limit() {
                return Err(self.desync("end point not on the path"));
            }
        }
    }

    /// Applies one packet and returns the PCs it confirmed.
    pub fn apply_packet(&mut self, packet: &TracePacket) -> Result<Vec<u64>, DecodeError> {
        let mut out = Vec::new();
        self.report.packets += 1;
        self.report.branch_bits += usize::from(packet.branch_count());
        match *packet {
            TracePacket::SyncStart { address, .. } => {
                self.report.sync_marks.push(self.report.pcs);
                match self.state.phase {
                    Phase::Tracing => {
                        if !self.state.pending_branch_bits.is_empty() || self.state.pc != address {
                            return Err(self.desync("sync does not match the reconstructed path"));
                        }
                        self.report.resyncs += 1;
                    }
                    Phase::Closed => {
                        self.jump(address)?;
                        self.report.resyncs += 1;
                    }
                    Phase::Idle | Phase::AwaitStop { close: false } => {
                        self.state.pending_branch_bits.clear();
                        self.jump(address)?;
                        self.report.syncs += 1;
                    }
                    Phase::AwaitStop { close: true } | Phase::AwaitTrapPoint { .. } => {
                        return Err(self.desync("sync while a stop point is outstanding"));
                    }
                }
                self.state.phase = Phase::Tracing;
                self.state.last_reported_addr = address;
            }
            TracePacket::Trap { handler, .. } => {
                if self.state.phase != Phase::Tracing {
                    return Err(self.desync("trap outside an active trace"));
                }
                self.state.phase = Phase::AwaitTrapPoint { handler };
                self.state.last_reported_addr = handler;
            }
            TracePacket::Support { qual_status, .. } => match (qual_status, self.state.phase) {
                (QualStatus::TraceLost, _) => {
                    self.state.pending_branch_bits.clear();
                    self.state.phase = Phase::Idle;
                    self.state.trace_lost = true;
                    self.report.loss_events += 1;
                }
                (QualStatus::EndedReported, Phase::Tracing) => {
                    self.state.phase = Phase::AwaitStop { close: false };
                }
                (QualStatus::EndedReported, Phase::Idle | Phase::AwaitStop { close: false }) => {}
                (QualStatus::NoChange, Phase::Tracing) => {
                    self.state.phase = Phase::AwaitStop { close: true };
                }
                _ => return Err(self.desync("support packet out of sequence")),
            },
            TracePacket::BranchMap {
                branches,
                delta: None,
            } => {
                if self.state.phase != Phase::Tracing {
                    return Err(self.desync("branch map outside an active trace"));
                }
                self.state.pending_branch_bits.extend(branches.iter());
                self.walk_bits(&mut out)?;
            }
            TracePacket::AddrOnly { .. } | TracePacket::BranchMap { .. } => {
                if let TracePacket::BranchMap { branches, .. } = packet {
                    self.state.pending_branch_bits.extend(branches.iter());
                }
                let delta = packet.delta().unwrap_or(0);
                let addr = self.state.last_reported_addr.wrapping_add(delta as u64);
                self.state.last_reported_addr = addr;
                match self.state.phase {
                    Phase::Tracing => self.walk_to_target(addr, &mut out)?,
                    Phase::AwaitTrapPoint { handler } => {
                        self.walk_until(addr, &mut out)?;
                        self.jump(handler)?;
                        self.state.phase = Phase::Tracing;
                    }
                    Phase::AwaitStop { close } => {
                        self.walk_through(addr, &mut out)?;
                        self.state.phase = if close { Phase::Closed } else { Phase::Idle };
                    }
                    Phase::Idle | Phase::Closed => {
                        return Err(self.desync("address outside an active trace"));
                    }
                }
            }
        }
        self.report.pcs += out.len();
        Ok(out)
    }
}

/// Decodes a whole packet stream from an idle state.
pub fn decode_stream(
    packets: &[TracePacket],
    map: &InstructionMap,
) -> Result<(Vec<u64>, DecodeReport), StreamError> {
    let mut decoder = Decoder::new(map);
    let mut pcs = Vec::new();
    for (index, packet) in packets.iter().enumerate() {
        let emitted = decoder
            .apply_packet(packet)
            .map_err(|source| StreamError { index, source })?;
        pcs.extend(emitted);
    }
    Ok((pcs, decoder.finish()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruction::parse_instruction_map;
    use crate::packet::BranchBits;

    fn map(text: &str) -> InstructionMap {
        parse_instruction_map(text).unwrap()
    }

    fn sync(address: u64) -> TracePacket {
        TracePacket::SyncStart {
            privilege: 3,
            address,
        }
    }

    fn support(qual_status: QualStatus) -> TracePacket {
        TracePacket::Support {
            enabled: true,
            qual_status,
        }
    }

    #[test]
    fn sync_then_target() {
        let m = map("0x1000,4,seq\n0x1004,4,jalr");
        let mut d = Decoder::new(&m);
        assert_eq!(d.apply_packet(&sync(0x1000)).unwrap(), vec![]);
        assert!(d.state().active());
        // target missing from the map
        assert_eq!(
            d.apply_packet(&TracePacket::AddrOnly { delta: -4 }),
            Err(DecodeError::UnknownAddress(0x0ffc))
        );
    }

    #[test]
    fn target_walk_emits_path() {
        let m = map("0x1000,4,seq\n0x1004,4,jalr");
        let mut d = Decoder::new(&m);
        d.apply_packet(&sync(0x1000)).unwrap();
        assert_eq!(
            d.apply_packet(&TracePacket::AddrOnly { delta: 0 }).unwrap(),
            vec![0x1000, 0x1004]
        );
        assert_eq!(d.state().pc, 0x1000);
    }

    #[test]
    fn trace_lost_deactivates() {
        let m = map("0x1000,4,seq");
        let mut d = Decoder::new(&m);
        d.apply_packet(&sync(0x1000)).unwrap();
        assert_eq!(d.apply_packet(&support(QualStatus::TraceLost)).unwrap(), vec![]);
        assert!(!d.state().active());
        assert!(d.state().trace_lost);
        assert_eq!(d.report().loss_events, 1);
    }

    #[test]
    fn branch_bits_drive_loop() {
        // loop: 0x1000 seq, 0x1004 br->0x1000, 0x1008 jalr
        let m = map("0x1000,4,seq\n0x1004,4,br,0x1000\n0x1008,4,jalr");
        let mut d = Decoder::new(&m);
        d.apply_packet(&sync(0x1000)).unwrap();
        // taken, taken, not taken, then jalr to 0x1000
        let branches = BranchBits::new(3, 0b100).unwrap();
        let out = d
            .apply_packet(&TracePacket::BranchMap {
                branches,
                delta: Some(0),
            })
            .unwrap();
        assert_eq!(
            out,
            vec![0x1000, 0x1004, 0x1000, 0x1004, 0x1000, 0x1004, 0x1008]
        );
    }

    #[test]
    fn full_map_walks_eagerly() {
        let m = map("0x1000,4,seq\n0x1004,4,br,0x1000\n0x1008,4,jalr");
        let mut d = Decoder::new(&m);
        d.apply_packet(&sync(0x1000)).unwrap();
        let full = BranchBits::new(31, 0).unwrap();
        let out = d
            .apply_packet(&TracePacket::BranchMap {
                branches: full,
                delta: None,
            })
            .unwrap();
        assert_eq!(out.len(), 62);
        assert_eq!(d.state().pc, 0x1000);
        assert!(d.state().pending_branch_bits.is_empty());
    }

    #[test]
    fn trap_stops_at_trap_point() {
        let m = map("0x1000,4,seq\n0x1004,4,seq\n0x1008,4,seq\n0x2000,4,mret");
        let mut d = Decoder::new(&m);
        d.apply_packet(&sync(0x1000)).unwrap();
        d.apply_packet(&TracePacket::Trap {
            interrupt: true,
            privilege: 3,
            cause: 7,
            tval: 0,
            handler: 0x2000,
        })
        .unwrap();
        // trap taken before 0x1008; delta is relative to the handler
        let out = d
            .apply_packet(&TracePacket::AddrOnly {
                delta: 0x1008 - 0x2000,
            })
            .unwrap();
        assert_eq!(out, vec![0x1000, 0x1004]);
        assert_eq!(d.state().pc, 0x2000);
        // mret back to the trap point
        let out = d
            .apply_packet(&TracePacket::AddrOnly { delta: 0x1008 - 0x1008 })
            .unwrap();
        assert_eq!(out, vec![0x2000]);
        assert_eq!(d.state().pc, 0x1008);
    }

    #[test]
    fn end_reports_last_instruction() {
        let m = map("0x1000,4,seq\n0x1004,4,seq\n0x1008,4,seq");
        let mut d = Decoder::new(&m);
        d.apply_packet(&sync(0x1000)).unwrap();
        d.apply_packet(&support(QualStatus::EndedReported)).unwrap();
        let out = d.apply_packet(&TracePacket::AddrOnly { delta: 4 }).unwrap();
        assert_eq!(out, vec![0x1000, 0x1004]);
        assert!(!d.state().active());
    }

    #[test]
    fn desync_on_address_while_idle() {
        let m = map("0x1000,4,seq");
        let mut d = Decoder::new(&m);
        assert!(matches!(
            d.apply_packet(&TracePacket::AddrOnly { delta: 0 }),
            Err(DecodeError::DesyncDetected { .. })
        ));
    }

    #[test]
    fn desync_when_target_needs_bits() {
        let m = map("0x1000,4,br,0x1000\n0x1004,4,jalr");
        let mut d = Decoder::new(&m);
        d.apply_packet(&sync(0x1000)).unwrap();
        assert!(matches!(
            d.apply_packet(&TracePacket::AddrOnly { delta: 0 }),
            Err(DecodeError::DesyncDetected { .. })
        ));
    }

    #[test]
    fn empty_stream() {
        let m = map("0x1000,4,seq");
        let (pcs, report) = decode_stream(&[], &m).unwrap();
        assert!(pcs.is_empty());
        assert_eq!(report, DecodeReport::default());
    }

    #[test]
    fn lost_then_resume() {
        let m = map("0x1000,4,seq\n0x1004,4,seq\n0x1008,4,seq\n0x100c,4,seq");
        let packets = [
            sync(0x1000),
            support(QualStatus::TraceLost),
            sync(0x1008),
            support(QualStatus::EndedReported),
            TracePacket::AddrOnly { delta: 4 },
        ];
        let (pcs, report) = decode_stream(&packets, &m).unwrap();
        assert_eq!(pcs, vec![0x1008, 0x100c]);
        assert_eq!(report.loss_events, 1);
        assert_eq!(report.sync_marks, vec![0, 0]);
    }
}
