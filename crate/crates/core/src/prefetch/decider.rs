//! Expander-side decider: observes demand reads and hit notifications,
//! predicts upcoming lines and when they will be demanded, and schedules
//! prefetches so they land in the host buffer ahead of the demand.

use std::collections::{HashSet, VecDeque};

use super::classifier::BehaviorClassifier;
use super::oracle::OracleSource;
use super::predictor::AddressPredictor;
use super::timing::{compute_issue_cycle, TimingHistory};
use super::window::{SlidingWindow, WindowEntry, DEFAULT_WINDOW};

pub const DEDUP_LINES: usize = 64;

/// What the decider believes about the fabric, in cycles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Belief {
    /// Latency from the device to the host buffer plus device read time.
    pub e2e_cycles: u64,
    /// One-way host-to-device latency; demand arrivals are this much later
    /// than the host-side request.
    pub down_cycles: u64,
    /// Extra latency of the io side channel over the memory channel.
    pub io_overhead_cycles: u64,
    pub margin_cycles: u64,
}

pub enum AddressSource {
    Model(Box<AddressPredictor>),
    Oracle(OracleSource),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationKind {
    Demand,
    Notification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub entry: WindowEntry,
    /// Trace index of the access, used only by the oracle.
    pub record: u64,
    pub kind: ObservationKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plan {
    pub line: u64,
    pub issue_cycle: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DeciderStats {
    pub demands: u64,
    pub notifications: u64,
    pub behavior_changes: u64,
    pub planned: u64,
    pub deduplicated: u64,
    pub skipped_late_steps: u64,
    pub prediction_errors: u64,
}

pub struct Decider {
    window: SlidingWindow,
    classifier: BehaviorClassifier,
    timing: TimingHistory,
    source: AddressSource,
    belief: Belief,
    degree: usize,
    recent: VecDeque<u64>,
    recent_set: HashSet<u64>,
    stats: DeciderStats,
}

impl Decider {
    pub fn new(source: AddressSource, belief: Belief, degree: usize) -> Self {
        Decider {
            window: SlidingWindow::new(DEFAULT_WINDOW),
            classifier: BehaviorClassifier::default(),
            timing: TimingHistory::new(),
            source,
            belief,
            degree,
            recent: VecDeque::with_capacity(DEDUP_LINES),
            recent_set: HashSet::new(),
            stats: DeciderStats::default(),
        }
    }

    pub fn belief(&self) -> Belief {
        self.belief
    }

    pub fn stats(&self) -> DeciderStats {
        self.stats
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    pub fn timing(&self) -> &TimingHistory {
        &self.timing
    }

    pub fn source(&self) -> &AddressSource {
        &self.source
    }

    fn remember(&mut self, line: u64) -> bool {
        if !self.recent_set.insert(line) {
            return false;
        }
        if self.recent.len() == DEDUP_LINES {
            let old = self.recent.pop_front().unwrap();
            self.recent_set.remove(&old);
        }
        self.recent.push_back(line);
        true
    }

    /// Issue cycle for the access `step` positions ahead, or `None` when
    /// no arrival can be predicted yet.
    fn issue_for(&self, step: usize, now: u64) -> Option<u64> {
        let next = self.timing.predict_next_arrival().ok()?;
        let mean = self.timing.mean_interval().ok()?;
        let host_time = next.saturating_sub(self.belief.down_cycles) + (step as u64 - 1) * mean;
        Some(compute_issue_cycle(host_time, self.belief.e2e_cycles + self.belief.margin_cycles, now))
    }

    /// Folds an observation into the window and timing history and returns
    /// the prefetches to issue, each at or after `now`.
    pub fn observe(&mut self, obs: Observation, now: u64) -> Vec<Plan> {
        let mut entry = obs.entry;
        match obs.kind {
            ObservationKind::Demand => self.stats.demands += 1,
            ObservationKind::Notification => {
                self.stats.notifications += 1;
                entry.arrival_cycle = entry.arrival_cycle.saturating_sub(self.belief.io_overhead_cycles);
            }
        }
        self.window.push(entry);
        self.timing.observe_arrival(entry.arrival_cycle);
        let (_, changed) = self.classifier.classify(&self.window);
        self.stats.behavior_changes += changed as u64;

        let candidates: Vec<(u64, usize)> = match &mut self.source {
            AddressSource::Model(p) => {
                p.record(entry);
                match p.rollout(&self.window, changed, self.degree) {
                    Ok(lines) => lines.into_iter().enumerate().map(|(i, l)| (l, i + 1)).collect(),
                    Err(_) => {
                        self.stats.prediction_errors += 1;
                        Vec::new()
                    }
                }
            }
            AddressSource::Oracle(o) => o.upcoming(obs.record, self.degree).into_iter().map(|l| (l.line, l.step)).collect(),
        };
        let mut plans = Vec::new();
        let last_step = candidates.last().map_or(0, |c| c.1);
        for (line, step) in candidates {
            let Some(issue) = self.issue_for(step, now) else { break };
            let unclamped = self.issue_for(step, 0).unwrap();
            if unclamped < now && step < last_step {
                self.stats.skipped_late_steps += 1;
                continue;
            }
            if !self.remember(line) {
                self.stats.deduplicated += 1;
                continue;
            }
            plans.push(Plan { line, issue_cycle: issue });
            if let AddressSource::Oracle(o) = &mut self.source {
                plans.extend(o.junk_for_issue().into_iter().map(|line| Plan { line, issue_cycle: issue }));
            }
        }
        self.stats.planned += plans.len() as u64;
        plans
    }
}
