use std::collections::VecDeque;

use thiserror::Error;

pub const TIMING_ENTRIES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TimingError {
    #[error("no arrival observed yet")]
    NoArrival,
    #[error("a single arrival gives no interval to average")]
    NoInterval,
}

/// Inter-arrival ring of the last ten demand intervals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TimingHistory {
    intervals: VecDeque<u64>,
    last: Option<u64>,
}

impl TimingHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Arrivals older than the latest one carry no new interval and are ignored.
    pub fn observe_arrival(&mut self, cycle: u64) {
        match self.last {
            Some(last) if cycle < last => {}
            Some(last) => {
                if self.intervals.len() == TIMING_ENTRIES {
                    self.intervals.pop_front();
                }
                self.intervals.push_back(cycle - last);
                self.last = Some(cycle);
            }
            None => self.last = Some(cycle),
        }
    }

    pub fn last_arrival(&self) -> Option<u64> {
        self.last
    }

    pub fn intervals(&self) -> impl ExactSizeIterator<Item = &u64> {
        self.intervals.iter()
    }

    /// Mean interval rounded to the nearest cycle.
    pub fn mean_interval(&self) -> Result<u64, TimingError> {
        if self.last.is_none() {
            return Err(TimingError::NoArrival);
        }
        let n = self.intervals.len() as u64;
        if n == 0 {
            return Err(TimingError::NoInterval);
        }
        let sum: u64 = self.intervals.iter().sum();
        Ok((sum + n / 2) / n)
    }

    pub fn predict_next_arrival(&self) -> Result<u64, TimingError> {
        let mean = self.mean_interval()?;
        Ok(self.last.unwrap() + mean)
    }
}

/// Latest cycle at which a prefetch must leave to land by `predicted_arrival`.
pub fn compute_issue_cycle(predicted_arrival: u64, e2e_cycles: u64, now: u64) -> u64 {
    predicted_arrival.saturating_sub(e2e_cycles).max(now)
}
