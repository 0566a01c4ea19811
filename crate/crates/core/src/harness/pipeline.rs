//! Encoder, optional lossy link, framing, decoder and verification in one
//! pass.

use thiserror::Error;

use crate::decoder::{decode_stream, DecodeReport, StreamError};
use crate::encoder::{cycles, qualify, EncodeError, Emitted, Encoder, EncoderConfig};
use crate::instruction::{block_pcs, InstructionMap, RetirementBlock, WalkError};
use crate::packet::{decode_packet, CodecError, QualStatus, TracePacket};
use crate::transport::{read_stream, write_stream, BoundedFifo, TransportError};

use super::report::{compute_compression, ReportError, TraceReport};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct FifoOptions {
    pub capacity: usize,
    /// Frames the consumer takes per elapsed cycle.
    pub drain_per_cycle: usize,
}

impl FifoOptions {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity,
            drain_per_cycle: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    pub config: EncoderConfig,
    /// None means a lossless link.
    pub fifo: Option<FifoOptions>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("frame {index}: {source}")]
    Codec { index: usize, source: CodecError },
    #[error("frame {0} decodes to a different packet than was sent")]
    CodecMismatch(usize),
    #[error(transparent)]
    Decode(#[from] StreamError),
    #[error(transparent)]
    Walk(#[from] WalkError),
    #[error("reconstructed PCs diverge from the source at index {0}")]
    RoundTripMismatch(usize),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("fifo capacity and drain rate must be at least 1")]
    InvalidFifo,
}

/// A stretch of decoder output that started at a sync.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Block the sync was emitted for.
    pub block: usize,
    /// Where the segment starts in the decoder output.
    pub first_pc: usize,
    pub pcs: usize,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// Packets that reached the decoder.
    pub packets: Vec<TracePacket>,
    pub stream: Vec<u8>,
    pub pcs: Vec<u64>,
    /// Retired PCs of qualified blocks, in order.
    pub expected: Vec<u64>,
    pub segments: Vec<Segment>,
    pub dropped: u64,
    /// Contiguous runs of dropped frames.
    pub loss_runs: u64,
    pub decode: DecodeReport,
    pub report: TraceReport,
}

/// PCs of the qualified blocks, and where each block starts in that list.
pub fn expected_pcs(
    map: &InstructionMap,
    blocks: &[RetirementBlock],
    config: &EncoderConfig,
) -> Result<(Vec<u64>, Vec<usize>), WalkError> {
    let mut pcs = Vec::new();
    let mut starts = Vec::with_capacity(blocks.len());
    for b in blocks {
        starts.push(pcs.len());
        if qualify(b, config) {
            pcs.extend(block_pcs(map, b)?);
        }
    }
    Ok((pcs, starts))
}

/// Bounded FIFO between encoder and sink. On overflow the encoder is told to
/// start over; nothing passes until its next sync, which goes out behind a
/// `TraceLost` marker.
struct LossyLink {
    fifo: BoundedFifo<Emitted>,
    drain_per_cycle: usize,
    enabled: bool,
    recovering: bool,
    marker_sent: bool,
    /// Retirement is over; the sink drains fully before each push.
    flushing: bool,
    loss_runs: u64,
    delivered: Vec<Emitted>,
}

impl LossyLink {
    fn new(options: FifoOptions, enabled: bool) -> Self {
        Self {
            fifo: BoundedFifo::new(options.capacity),
            drain_per_cycle: options.drain_per_cycle,
            enabled,
            recovering: false,
            marker_sent: false,
            flushing: false,
            loss_runs: 0,
            delivered: Vec::new(),
        }
    }

    fn offer(&mut self, batch: Vec<Emitted>, encoder: &mut Encoder) {
        for e in batch {
            if self.recovering {
                if !matches!(e.packet, TracePacket::SyncStart { .. }) {
                    continue;
                }
                if !self.marker_sent {
                    if !self.has_room() {
                        encoder.notify_loss();
                        return;
                    }
                    let marker = TracePacket::Support {
                        enabled: self.enabled,
                        qual_status: QualStatus::TraceLost,
                    };
                    self.fifo.push(Emitted {
                        block: e.block,
                        packet: marker,
                    });
                    self.marker_sent = true;
                }
                if !self.has_room() {
                    encoder.notify_loss();
                    return;
                }
                self.fifo.push(e);
                self.recovering = false;
                continue;
            }
            self.has_room();
            let pushed = self.fifo.push(e);
            if !pushed.accepted {
                self.loss_runs += u64::from(pushed.loss_event);
                self.recovering = true;
                self.marker_sent = false;
                // Later packets in this batch describe state the decoder
                // will never see.
                encoder.notify_loss();
                return;
            }
        }
    }

    fn has_room(&mut self) -> bool {
        if self.flushing {
            self.drain(u64::MAX);
        }
        !self.fifo.is_full()
    }

    fn drain(&mut self, cycles: u64) {
        let budget = cycles.saturating_mul(self.drain_per_cycle as u64);
        for _ in 0..budget {
            match self.fifo.pop() {
                Some(e) => self.delivered.push(e),
                None => break,
            }
        }
    }

    fn finish(mut self) -> LinkOutput {
        while let Some(e) = self.fifo.pop() {
            self.delivered.push(e);
        }
        LinkOutput {
            delivered: self.delivered,
            dropped: self.fifo.dropped(),
            loss_runs: self.loss_runs,
        }
    }
}

struct LinkOutput {
    delivered: Vec<Emitted>,
    dropped: u64,
    loss_runs: u64,
}

fn encode_through_link(
    blocks: &[RetirementBlock],
    options: &PipelineOptions,
) -> Result<LinkOutput, EncodeError> {
    let mut encoder = Encoder::new(options.config.clone())?;
    let Some(fifo) = options.fifo else {
        let mut out = Vec::new();
        for cycle in cycles(blocks) {
            out.extend(encoder.step_tagged(cycle)?);
        }
        out.extend(encoder.flush_tagged());
        return Ok(LinkOutput {
            delivered: out,
            dropped: 0,
            loss_runs: 0,
        });
    };
    let mut link = LossyLink::new(fifo, options.config.enabled);
    let mut last_cycle = None;
    for cycle in cycles(blocks) {
        let now = cycle[0].cycle;
        if let Some(prev) = last_cycle {
            link.drain(now - prev);
        }
        last_cycle = Some(now);
        let batch = encoder.step_tagged(cycle)?;
        link.offer(batch, &mut encoder);
    }
    link.flushing = true;
    let batch = encoder.flush_tagged();
    link.offer(batch, &mut encoder);
    Ok(link.finish())
}

/// Compares one decoded segment with the source; returns the first
/// divergent output index.
fn check_segment(pcs: &[u64], expected: &[u64], seg: &Segment, start: usize) -> Option<usize> {
    let got = &pcs[seg.first_pc..seg.first_pc + seg.pcs];
    let want = expected.get(start..).unwrap_or(&[]);
    got.iter()
        .enumerate()
        .find(|(i, pc)| want.get(*i) != Some(pc))
        .map(|(i, _)| seg.first_pc + i)
}

pub fn run_pipeline(
    map: &InstructionMap,
    blocks: &[RetirementBlock],
    options: &PipelineOptions,
) -> Result<PipelineOutput, PipelineError> {
    if options.fifo.is_some_and(|f| f.capacity == 0 || f.drain_per_cycle == 0) {
        return Err(PipelineError::InvalidFifo);
    }
    let (expected, starts) = expected_pcs(map, blocks, &options.config)?;
    let LinkOutput {
        delivered,
        dropped,
        loss_runs,
    } = encode_through_link(blocks, options)?;

    let sent: Vec<TracePacket> = delivered.iter().map(|e| e.packet).collect();
    let mut stream = Vec::new();
    write_stream(&sent, &mut stream)?;
    let mut packets = Vec::with_capacity(sent.len());
    for (index, payload) in read_stream(&stream[..])?.iter().enumerate() {
        let p = decode_packet(payload).map_err(|source| PipelineError::Codec { index, source })?;
        if p != sent[index] {
            return Err(PipelineError::CodecMismatch(index));
        }
        packets.push(p);
    }

    let (pcs, decode) = decode_stream(&packets, map)?;

    let sync_blocks: Vec<usize> = delivered
        .iter()
        .filter(|e| matches!(e.packet, TracePacket::SyncStart { .. }))
        .map(|e| e.block)
        .collect();
    if decode.sync_marks.first().is_some_and(|&m| m != 0) {
        return Err(PipelineError::RoundTripMismatch(0));
    }
    let mut segments = Vec::with_capacity(sync_blocks.len());
    for (s, &block) in sync_blocks.iter().enumerate() {
        let first_pc = decode.sync_marks[s];
        let end = decode.sync_marks.get(s + 1).copied().unwrap_or(pcs.len());
        let seg = Segment {
            block,
            first_pc,
            pcs: end - first_pc,
        };
        if let Some(at) = check_segment(&pcs, &expected, &seg, starts[block]) {
            return Err(PipelineError::RoundTripMismatch(at));
        }
        segments.push(seg);
    }
    if dropped == 0 && pcs != expected {
        let at = pcs
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(pcs.len().min(expected.len()));
        return Err(PipelineError::RoundTripMismatch(at));
    }

    let report = compute_compression(
        expected.len() as u64,
        stream.len() as u64,
        &packets,
        decode.loss_events as u64,
    )?;
    Ok(PipelineOutput {
        packets,
        stream,
        pcs,
        expected,
        segments,
        dropped,
        loss_runs,
        decode,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::workload::{generate_workload, loop_workload, WorkloadParams};

    #[test]
    fn lossless_round_trip() {
        for seed in 0..30 {
            let w = generate_workload(&WorkloadParams {
                seed,
                instruction_count: 5_000,
                trap_rate: 20.0,
                lanes: 2,
                ..WorkloadParams::default()
            })
            .unwrap();
            let options = PipelineOptions {
                config: EncoderConfig {
                    lanes: 2,
                    ..EncoderConfig::default()
                },
                fifo: None,
            };
            let out = run_pipeline(&w.map, &w.blocks, &options)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert_eq!(out.pcs, out.expected);
            assert_eq!(out.report.retired_instructions, 5_000);
        }
    }

    #[test]
    fn roomy_fifo_is_lossless() {
        let w = generate_workload(&WorkloadParams::default()).unwrap();
        let baseline = run_pipeline(&w.map, &w.blocks, &PipelineOptions::default()).unwrap();
        let options = PipelineOptions {
            fifo: Some(FifoOptions::with_capacity(baseline.packets.len())),
            ..PipelineOptions::default()
        };
        let out = run_pipeline(&w.map, &w.blocks, &options).unwrap();
        assert_eq!(out.dropped, 0);
        assert_eq!(out.pcs, baseline.pcs);
        assert_eq!(out.stream, baseline.stream);
    }

    #[test]
    fn tiny_fifo_recovers() {
        let w = generate_workload(&WorkloadParams {
            seed: 4,
            ..WorkloadParams::default()
        })
        .unwrap();
        let options = PipelineOptions {
            fifo: Some(FifoOptions::with_capacity(1)),
            ..PipelineOptions::default()
        };
        let out = run_pipeline(&w.map, &w.blocks, &options).unwrap();
        assert!(out.report.loss_events > 0);
        assert!(out.dropped >= out.report.loss_events);
        assert!(out.segments.iter().map(|s| s.pcs).sum::<usize>() > 0);
    }

    #[test]
    fn filtered_trace_round_trips() {
        let w = generate_workload(&WorkloadParams {
            seed: 11,
            trap_rate: 0.0,
            ..WorkloadParams::default()
        })
        .unwrap();
        let lo = 0x8000_0000;
        let options = PipelineOptions {
            config: EncoderConfig {
                addr_ranges: vec![lo..lo + 0x800],
                ..EncoderConfig::default()
            },
            fifo: None,
        };
        let out = run_pipeline(&w.map, &w.blocks, &options).unwrap();
        assert!(out.expected.len() < w.retired() as usize);
        assert_eq!(out.pcs, out.expected);
    }

    #[test]
    fn loop_compresses() {
        let w = loop_workload(10, 31 * 100);
        let out = run_pipeline(&w.map, &w.blocks, &PipelineOptions::default()).unwrap();
        assert!(out.report.compression_rate_percent > 99.0);
    }
}
