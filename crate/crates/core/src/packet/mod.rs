//! Trace packet wire format.
//!
//! Every field is appended LSB-first. The header is a 2-bit format
//! (`1` branch map, `2` address only, `3` the sync/trap/support family with a
//! 2-bit subformat: `0` sync, `1` trap, `3` support). Only the last field of a
//! packet varies in length; its width is whatever the payload length leaves
//! over, and the value is sign-extended from there.

pub mod bits;
mod text;

use thiserror::Error;

use self::bits::{BitReader, BitWriter};

pub use self::text::ParsePacketError;

/// Largest payload a frame can carry.
pub const MAX_PAYLOAD: usize = 255;

const FORMAT_BRANCH_MAP: u64 = 1;
const FORMAT_ADDR_ONLY: u64 = 2;
const FORMAT_EXTENDED: u64 = 3;
const SUB_SYNC: u64 = 0;
const SUB_TRAP: u64 = 1;
const SUB_SUPPORT: u64 = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum QualStatus {
    NoChange = 0,
    EndedReported = 1,
    TraceLost = 2,
}

impl QualStatus {
    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Self::NoChange),
            1 => Some(Self::EndedReported),
            2 => Some(Self::TraceLost),
            _ => None,
        }
    }
}

/// Up to 31 branch outcomes, oldest in bit 0. A set bit means not taken.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BranchBits {
    count: u8,
    bits: u32,
}

impl BranchBits {
    pub const CAPACITY: u8 = 31;

    pub fn new(count: u8, bits: u32) -> Option<Self> {
        (count <= Self::CAPACITY).then(|| Self {
            count,
            bits: bits & mask(count),
        })
    }

    pub fn count(&self) -> u8 {
        self.count
    }

    pub fn raw(&self) -> u32 {
        self.bits
    }

    pub fn is_full(&self) -> bool {
        self.count == Self::CAPACITY
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Outcome of the `i`th oldest branch.
    pub fn taken(&self, i: u8) -> Option<bool> {
        (i < self.count).then(|| self.bits >> i & 1 == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.count).map(|i| self.bits >> i & 1 == 0)
    }

    /// Appends an outcome; `None` when already full.
    pub fn push(&mut self, taken: bool) -> Option<()> {
        if self.is_full() {
            return None;
        }
        if !taken {
            self.bits |= 1 << self.count;
        }
        self.count += 1;
        Some(())
    }
}

fn mask(count: u8) -> u32 {
    if count >= 32 {
        u32::MAX
    } else {
        (1u32 << count) - 1
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum TracePacket {
    SyncStart {
        privilege: u8,
        address: u64,
    },
    Trap {
        interrupt: bool,
        privilege: u8,
        cause: u16,
        tval: u64,
        handler: u64,
    },
    Support {
        enabled: bool,
        qual_status: QualStatus,
    },
    AddrOnly {
        delta: i64,
    },
    /// A full map (31 branches) never carries a delta; any shorter map does.
    BranchMap {
        branches: BranchBits,
        delta: Option<i64>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PacketKind {
    SyncStart,
    Trap,
    Support,
    AddrOnly,
    BranchMap,
}

impl PacketKind {
    pub const ALL: [PacketKind; 5] = [
        Self::SyncStart,
        Self::Trap,
        Self::Support,
        Self::AddrOnly,
        Self::BranchMap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SyncStart => "sync",
            Self::Trap => "trap",
            Self::Support => "support",
            Self::AddrOnly => "addr",
            Self::BranchMap => "bmap",
        }
    }
}

impl TracePacket {
    pub fn kind(&self) -> PacketKind {
        match self {
            Self::SyncStart { .. } => PacketKind::SyncStart,
            Self::Trap { .. } => PacketKind::Trap,
            Self::Support { .. } => PacketKind::Support,
            Self::AddrOnly { .. } => PacketKind::AddrOnly,
            Self::BranchMap { .. } => PacketKind::BranchMap,
        }
    }

    /// Branch outcomes carried by this packet.
    pub fn branch_count(&self) -> u8 {
        match self {
            Self::BranchMap { branches, .. } => branches.count(),
            _ => 0,
        }
    }

    /// Differential address field, if present.
    pub fn delta(&self) -> Option<i64> {
        match *self {
            Self::AddrOnly { delta } => Some(delta),
            Self::BranchMap { delta, .. } => delta,
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("payload is {0} bytes, over the {MAX_PAYLOAD}-byte frame limit")]
    PayloadTooLong(usize),
    #[error("packet fields out of range")]
    InvalidPacket,
    #[error("unknown or reserved packet format")]
    UnknownFormat,
    #[error("payload too short for its format")]
    TruncatedPayload,
    #[error("qual_status code {0} is not defined")]
    InvalidQualStatus(u64),
}

/// A sign-compressed field: the low `width` bits of `raw`, with every bit
/// from 64 upwards a copy of bit 63.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SignedField {
    pub width: usize,
    pub raw: u64,
}

fn fits_signed(value: i64, width: usize) -> bool {
    if width >= 64 {
        return true;
    }
    let half = 1i64 << (width - 1);
    (-half..half).contains(&value)
}

/// Shortest sign-extendable encoding of `value` that ends on a byte boundary
/// when it starts `start_offset` bits into a byte.
pub fn compress_signed(value: i64, start_offset: usize) -> SignedField {
    debug_assert!(start_offset < 8);
    let mut width = 8 - start_offset;
    while !fits_signed(value, width) {
        width += 8;
    }
    SignedField {
        width,
        raw: value as u64,
    }
}

/// Two's-complement sign extension of the low `width` bits of `raw`.
pub fn decompress_signed(raw: u64, width: usize) -> i64 {
    debug_assert!(width >= 1);
    if width >= 64 {
        raw as i64
    } else {
        let shift = 64 - width as u32;
        ((raw << shift) as i64) >> shift
    }
}

fn push_signed(w: &mut BitWriter, value: i64) {
    let field = compress_signed(value, w.len() % 8);
    w.push(field.raw, field.width);
}

/// Reads the trailing variable-length field: everything left in the payload.
fn read_signed(r: &mut BitReader<'_>) -> Result<i64, CodecError> {
    let width = r.remaining();
    if width == 0 {
        return Err(CodecError::TruncatedPayload);
    }
    let raw = r.read(width.min(64)).ok_or(CodecError::TruncatedPayload)?;
    Ok(decompress_signed(raw, width))
}

/// Serializes a packet into its payload bytes.
pub fn encode_packet(packet: &TracePacket) -> Result<Vec<u8>, CodecError> {
    let mut w = BitWriter::new();
    match *packet {
        TracePacket::SyncStart { privilege, address } => {
            if privilege > 3 {
                return Err(CodecError::InvalidPacket);
            }
            w.push(FORMAT_EXTENDED, 2);
            w.push(SUB_SYNC, 2);
            w.push(privilege.into(), 2);
            push_signed(&mut w, address as i64);
        }
        TracePacket::Trap {
            interrupt,
            privilege,
            cause,
            tval,
            handler,
        } => {
            if privilege > 3 {
                return Err(CodecError::InvalidPacket);
            }
            w.push(FORMAT_EXTENDED, 2);
            w.push(SUB_TRAP, 2);
            w.push(interrupt.into(), 1);
            w.push(privilege.into(), 2);
            w.align();
            w.push(cause.into(), 16);
            w.push(tval, 64);
            push_signed(&mut w, handler as i64);
        }
        TracePacket::Support {
            enabled,
            qual_status,
        } => {
            w.push(FORMAT_EXTENDED, 2);
            w.push(SUB_SUPPORT, 2);
            w.push(enabled.into(), 1);
            w.push(qual_status as u64, 2);
            w.align();
        }
        TracePacket::AddrOnly { delta } => {
            w.push(FORMAT_ADDR_ONLY, 2);
            push_signed(&mut w, delta);
        }
        TracePacket::BranchMap { branches, delta } => {
            w.push(FORMAT_BRANCH_MAP, 2);
            match (branches.is_full(), delta) {
                (true, None) => {
                    w.push(0, 5);
                    w.push(branches.raw().into(), 31);
                    w.align();
                }
                (false, Some(delta)) if !branches.is_empty() => {
                    w.push(branches.count().into(), 5);
                    w.push(branches.raw().into(), branches.count().into());
                    push_signed(&mut w, delta);
                }
                _ => return Err(CodecError::InvalidPacket),
            }
        }
    }
    let bytes = w.into_bytes();
    if bytes.len() > MAX_PAYLOAD {
        return Err(CodecError::PayloadTooLong(bytes.len()));
    }
    Ok(bytes)
}

/// Parses one payload; the exact inverse of [`encode_packet`].
pub fn decode_packet(payload: &[u8]) -> Result<TracePacket, CodecError> {
    use CodecError::TruncatedPayload as T;
    let mut r = BitReader::new(payload);
    match r.read(2).ok_or(T)? {
        FORMAT_BRANCH_MAP => {
            let count = r.read(5).ok_or(T)? as u8;
            if count == 0 {
                let raw = r.read(31).ok_or(T)? as u32;
                let branches = BranchBits::new(BranchBits::CAPACITY, raw).ok_or(T)?;
                Ok(TracePacket::BranchMap {
                    branches,
                    delta: None,
                })
            } else if count == BranchBits::CAPACITY {
                // A full map is only ever sent with count 0.
                Err(CodecError::InvalidPacket)
            } else {
                let raw = r.read(count.into()).ok_or(T)? as u32;
                let branches = BranchBits::new(count, raw).ok_or(T)?;
                let delta = read_signed(&mut r)?;
                Ok(TracePacket::BranchMap {
                    branches,
                    delta: Some(delta),
                })
            }
        }
        FORMAT_ADDR_ONLY => Ok(TracePacket::AddrOnly {
            delta: read_signed(&mut r)?,
        }),
        FORMAT_EXTENDED => match r.read(2).ok_or(T)? {
            SUB_SYNC => {
                let privilege = r.read(2).ok_or(T)? as u8;
                let address = read_signed(&mut r)? as u64;
                Ok(TracePacket::SyncStart { privilege, address })
            }
            SUB_TRAP => {
                let interrupt = r.read(1).ok_or(T)? == 1;
                let privilege = r.read(2).ok_or(T)? as u8;
                r.skip(1).ok_or(T)?;
                let cause = r.read(16).ok_or(T)? as u16;
                let tval = r.read(64).ok_or(T)?;
                let handler = read_signed(&mut r)? as u64;
                Ok(TracePacket::Trap {
                    interrupt,
                    privilege,
                    cause,
                    tval,
                    handler,
                })
            }
            SUB_SUPPORT => {
                let enabled = r.read(1).ok_or(T)? == 1;
                let code = r.read(2).ok_or(T)?;
                let qual_status =
                    QualStatus::from_code(code).ok_or(CodecError::InvalidQualStatus(code))?;
                Ok(TracePacket::Support {
                    enabled,
                    qual_status,
                })
            }
            _ => Err(CodecError::UnknownFormat),
        },
        _ => Err(CodecError::UnknownFormat),
    }
}
