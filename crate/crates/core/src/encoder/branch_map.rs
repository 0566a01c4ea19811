//! The 31-slot branch outcome register and its counter.

use thiserror::Error;

use crate::packet::BranchBits;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("branch map is full; emit it before recording more outcomes")]
pub struct MapFull;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchMapState {
    bits: BranchBits,
}

impl BranchMapState {
    pub fn count(&self) -> u8 {
        self.bits.count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.is_full()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> BranchBits {
        self.bits
    }

    /// Records one outcome at slot `count`: taken is 0, not taken is 1.
    pub fn record_branch(&mut self, taken: bool) -> Result<(), MapFull> {
        self.bits.push(taken).ok_or(MapFull)
    }

    /// Hands the recorded outcomes to a packet and clears the register.
    pub fn take(&mut self) -> BranchBits {
        std::mem::take(&mut self.bits)
    }
}
