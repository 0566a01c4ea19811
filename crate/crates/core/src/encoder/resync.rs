//! Periodic resynchronization counter.

use super::config::ResyncMode;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ResyncEvent {
    PacketEmitted,
    CycleElapsed,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ResyncState {
    pub mode: ResyncMode,
    pub threshold: u64,
    pub counter: u64,
    pub pending: bool,
}

impl ResyncState {
    pub fn new(mode: ResyncMode, threshold: u64) -> Self {
        Self {
            mode,
            threshold,
            counter: 0,
            pending: false,
        }
    }

    /// Counts `event` when it matches the mode; raises `pending` at the
    /// threshold.
    pub fn tick(&mut self, event: ResyncEvent) {
        let counts = matches!(
            (self.mode, event),
            (ResyncMode::PacketCount, ResyncEvent::PacketEmitted)
                | (ResyncMode::CycleCount, ResyncEvent::CycleElapsed)
        );
        if counts {
            self.counter += 1;
        }
        if self.counter >= self.threshold {
            self.pending = true;
        }
    }

    /// Called once a sync packet has gone out.
    pub fn reset(&mut self) {
        self.counter = 0;
        self.pending = false;
    }
}
