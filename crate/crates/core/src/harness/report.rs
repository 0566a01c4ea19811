//! Compression accounting against a 4-byte-per-instruction baseline.

use std::fmt;

use thiserror::Error;

use crate::packet::{PacketKind, TracePacket};

/// Bytes per instruction if every retired instruction were traced in full.
pub const BASELINE_BYTES: u64 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("no retired instructions to compare against")]
    EmptyStream,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceReport {
    pub retired_instructions: u64,
    /// Whole persisted stream: magic, length bytes and payloads.
    pub payload_bytes: u64,
    pub packets_by_kind: [(PacketKind, u64); PacketKind::ALL.len()],
    pub compression_rate_percent: f64,
    pub loss_events: u64,
}

impl TraceReport {
    pub fn packets(&self) -> u64 {
        self.packets_by_kind.iter().map(|(_, n)| n).sum()
    }
}

pub fn count_kinds(packets: &[TracePacket]) -> [(PacketKind, u64); PacketKind::ALL.len()] {
    let mut counts = PacketKind::ALL.map(|k| (k, 0));
    for p in packets {
        let kind = p.kind();
        if let Some(slot) = counts.iter_mut().find(|(k, _)| *k == kind) {
            slot.1 += 1;
        }
    }
    counts
}

pub fn compute_compression(
    retired_instructions: u64,
    payload_bytes: u64,
    packets: &[TracePacket],
    loss_events: u64,
) -> Result<TraceReport, ReportError> {
    if retired_instructions == 0 {
        return Err(ReportError::EmptyStream);
    }
    let baseline = (BASELINE_BYTES * retired_instructions) as f64;
    Ok(TraceReport {
        retired_instructions,
        payload_bytes,
        packets_by_kind: count_kinds(packets),
        compression_rate_percent: 100.0 * (1.0 - payload_bytes as f64 / baseline),
        loss_events,
    })
}

impl fmt::Display for TraceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "retired_instructions={}", self.retired_instructions)?;
        writeln!(f, "payload_bytes={}", self.payload_bytes)?;
        writeln!(f, "packets={}", self.packets())?;
        for (kind, n) in &self.packets_by_kind {
            writeln!(f, "packets.{}={n}", kind.name())?;
        }
        writeln!(f, "compression_rate_percent={:.1}", self.compression_rate_percent)?;
        writeln!(f, "loss_events={}", self.loss_events)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        let r = compute_compression(1000, 40, &[], 0).unwrap();
        assert_eq!(r.compression_rate_percent, 99.0);
        let r = compute_compression(1000, 4000, &[], 0).unwrap();
        assert_eq!(r.compression_rate_percent, 0.0);
        assert_eq!(compute_compression(0, 4, &[], 0), Err(ReportError::EmptyStream));
    }

    #[test]
    fn full_precision_before_display() {
        let r = compute_compression(3, 1, &[], 0).unwrap();
        assert_eq!(r.compression_rate_percent, 100.0 * (1.0 - 1.0 / 12.0));
        assert!(r.to_string().contains("compression_rate_percent=91.7\n"));
    }

    #[test]
    fn counts_kinds() {
        let packets = [
            TracePacket::AddrOnly { delta: 1 },
            TracePacket::AddrOnly { delta: 2 },
            TracePacket::SyncStart {
                privilege: 3,
                address: 0,
            },
        ];
        let r = compute_compression(10, 10, &packets, 1).unwrap();
        assert_eq!(r.packets(), 3);
        let text = r.to_string();
        assert!(text.contains("loss_events=1\n"));
        for kind in PacketKind::ALL {
            assert!(text.contains(&format!("packets.{}=", kind.name())));
        }
    }
}
