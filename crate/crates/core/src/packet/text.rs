//! One-line textual form of packets, used by golden fixtures and the CLI.
//!
//! ```text
//! sync priv=3 addr=0x80000000
//! trap irq=0 priv=3 cause=2 tval=0x0 handler=0x80000100
//! support enabled=1 qual=ended
//! addr delta=-4
//! bmap n=5 bits=0x16 delta=12
//! bmap n=31 bits=0x55555555
//! ```

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::{BranchBits, QualStatus, TracePacket};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot parse packet: {0}")]
pub struct ParsePacketError(String);

impl QualStatus {
    fn name(self) -> &'static str {
        match self {
            Self::NoChange => "nochange",
            Self::EndedReported => "ended",
            Self::TraceLost => "lost",
        }
    }
}

impl fmt::Display for TracePacket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::SyncStart { privilege, address } => {
                write!(f, "sync priv={privilege} addr={address:#x}")
            }
            Self::Trap {
                interrupt,
                privilege,
                cause,
                tval,
                handler,
            } => write!(
                f,
                "trap irq={} priv={privilege} cause={cause} tval={tval:#x} handler={handler:#x}",
                u8::from(interrupt)
            ),
            Self::Support {
                enabled,
                qual_status,
            } => write!(
                f,
                "support enabled={} qual={}",
                u8::from(enabled),
                qual_status.name()
            ),
            Self::AddrOnly { delta } => write!(f, "addr delta={delta}"),
            Self::BranchMap { branches, delta } => {
                write!(f, "bmap n={} bits={:#x}", branches.count(), branches.raw())?;
                if let Some(delta) = delta {
                    write!(f, " delta={delta}")?;
                }
                Ok(())
            }
        }
    }
}

fn number(fields: &HashMap<&str, &str>, key: &str) -> Result<u64, ParsePacketError> {
    let v = fields
        .get(key)
        .ok_or_else(|| ParsePacketError(format!("missing {key}")))?;
    let parsed = match v.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => v.parse(),
    };
    parsed.map_err(|_| ParsePacketError(format!("bad {key}: {v}")))
}

fn small<T: TryFrom<u64>>(fields: &HashMap<&str, &str>, key: &str) -> Result<T, ParsePacketError> {
    T::try_from(number(fields, key)?).map_err(|_| ParsePacketError(format!("{key} out of range")))
}

fn signed(fields: &HashMap<&str, &str>, key: &str) -> Result<i64, ParsePacketError> {
    let v = fields
        .get(key)
        .ok_or_else(|| ParsePacketError(format!("missing {key}")))?;
    v.parse()
        .map_err(|_| ParsePacketError(format!("bad {key}: {v}")))
}

impl FromStr for TracePacket {
    type Err = ParsePacketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut words = s.split_whitespace();
        let tag = words
            .next()
            .ok_or_else(|| ParsePacketError("empty".into()))?;
        let mut fields = HashMap::new();
        for word in words {
            let (k, v) = word
                .split_once('=')
                .ok_or_else(|| ParsePacketError(format!("expected key=value, got {word}")))?;
            fields.insert(k, v);
        }
        Ok(match tag {
            "sync" => Self::SyncStart {
                privilege: small(&fields, "priv")?,
                address: number(&fields, "addr")?,
            },
            "trap" => Self::Trap {
                interrupt: number(&fields, "irq")? != 0,
                privilege: small(&fields, "priv")?,
                cause: small(&fields, "cause")?,
                tval: number(&fields, "tval")?,
                handler: number(&fields, "handler")?,
            },
            "support" => Self::Support {
                enabled: number(&fields, "enabled")? != 0,
                qual_status: match fields.get("qual").copied() {
                    Some("nochange") => QualStatus::NoChange,
                    Some("ended") => QualStatus::EndedReported,
                    Some("lost") => QualStatus::TraceLost,
                    other => return Err(ParsePacketError(format!("bad qual {other:?}"))),
                },
            },
            "addr" => Self::AddrOnly {
                delta: signed(&fields, "delta")?,
            },
            "bmap" => {
                let branches = BranchBits::new(small(&fields, "n")?, small(&fields, "bits")?)
                    .ok_or_else(|| ParsePacketError("too many branches".into()))?;
                let delta = match fields.contains_key("delta") {
                    true => Some(signed(&fields, "delta")?),
                    false => None,
                };
                Self::BranchMap { branches, delta }
            }
            other => return Err(ParsePacketError(format!("unknown packet {other}"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_parses_back() {
        let packets = [
            "sync priv=3 addr=0x80000000",
            "trap irq=1 priv=3 cause=7 tval=0x0 handler=0x80000100",
            "support enabled=1 qual=lost",
            "addr delta=-4",
            "bmap n=5 bits=0x16 delta=12",
            "bmap n=31 bits=0x55555555",
        ];
        for text in packets {
            let p: TracePacket = text.parse().unwrap();
            assert_eq!(p.to_string(), text);
        }
        assert!("bmap n=32 bits=0".parse::<TracePacket>().is_err());
        assert!("nope".parse::<TracePacket>().is_err());
    }
}
