//! Unpredictable scan scheduling.
//!
//! Delays are drawn uniformly from the current epoch bounds
//! `[base_min, base_max]`; after every `epoch_length` draws the bounds
//! themselves are re-drawn inside the configured outer bounds, so even an
//! observer who has inferred the current interval loses it again. Draws are
//! at nanosecond granularity, making the re-draw space far larger than 2^32
//! pairs.

use std::time::Duration;

use rand::RngExt as _;

use crate::rng::Csprng;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("bounds must satisfy 0 < min <= max")]
    InvalidBounds,
    #[error("epoch length must be at least 1")]
    InvalidEpoch,
}

#[derive(Debug, Clone)]
pub struct ScanSchedule {
    outer_min_ns: u64,
    outer_max_ns: u64,
    base_min_ns: u64,
    base_max_ns: u64,
    epoch_length: u32,
    draws_in_epoch: u32,
    rng: Csprng,
}

impl ScanSchedule {
    /// Outer bounds cap every epoch's `[base_min, base_max]`; the initial
    /// epoch bounds are drawn immediately.
    pub fn new(
        outer_min: Duration,
        outer_max: Duration,
        epoch_length: u32,
        rng: Csprng,
    ) -> Result<ScanSchedule, ScheduleError> {
        let outer_min_ns = outer_min.as_nanos() as u64;
        let outer_max_ns = outer_max.as_nanos() as u64;
        if outer_min_ns == 0 || outer_min_ns > outer_max_ns {
            return Err(ScheduleError::InvalidBounds);
        }
        if epoch_length == 0 {
            return Err(ScheduleError::InvalidEpoch);
        }
        let mut schedule = ScanSchedule {
            outer_min_ns,
            outer_max_ns,
            base_min_ns: outer_min_ns,
            base_max_ns: outer_max_ns,
            epoch_length,
            draws_in_epoch: 0,
            rng,
        };
        schedule.redraw_bounds();
        Ok(schedule)
    }

    /// Current epoch bounds.
    pub fn current_bounds(&self) -> (Duration, Duration) {
        (
            Duration::from_nanos(self.base_min_ns),
            Duration::from_nanos(self.base_max_ns),
        )
    }

    /// Draw the next delay. Every emitted delay lies in the current epoch's
    /// `[base_min, base_max]`; bounds re-draw exactly every `epoch_length`
    /// draws.
    pub fn next_scan_delay(&mut self) -> Duration {
        if self.draws_in_epoch == self.epoch_length {
            self.redraw_bounds();
        }
        self.draws_in_epoch += 1;
        let delay_ns = self.rng.random_range(self.base_min_ns..=self.base_max_ns);
        Duration::from_nanos(delay_ns)
    }

    /// Start a fresh epoch, as after a target restart.
    pub fn reset(&mut self) {
        self.redraw_bounds();
    }

    fn redraw_bounds(&mut self) {
        let a = self.rng.random_range(self.outer_min_ns..=self.outer_max_ns);
        let b = self.rng.random_range(self.outer_min_ns..=self.outer_max_ns);
        self.base_min_ns = a.min(b);
        self.base_max_ns = a.max(b);
        self.draws_in_epoch = 0;
    }
}
