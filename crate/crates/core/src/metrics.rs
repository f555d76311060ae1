//! Run metrics: throughput, deadline-miss ratio and response times.
//!
//! Only jobs released at or after the warm-up cut count towards DMR and
//! response times; throughput counts completions inside the window.

use serde::{Deserialize, Serialize};

use crate::gpu::Policy;
use crate::model::Priority;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
}

impl ResponseStats {
    /// Zeros for an empty sample.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return ResponseStats::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        ResponseStats {
            mean: sorted.iter().sum::<f64>() / n as f64,
            min: sorted[0],
            max: sorted[n - 1],
            p95: sorted[rank - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub released: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub missed: u64,
    pub completed: u64,
    /// Accepted but unfinished at the end of the run.
    pub in_flight: u64,
    /// `missed / accepted`, 0 when nothing was accepted.
    pub dmr: f64,
    pub response: ResponseStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_label: String,
    pub policy: Option<Policy>,
    pub n_contexts: u32,
    pub n_streams: u32,
    pub oversubscription: f64,
    pub seed: u64,
    pub duration: f64,
    /// Start of the measurement window.
    pub warmup: f64,
    /// Completed jobs (times batch size) per second of the measurement window.
    pub jps: f64,
    pub hp: ClassMetrics,
    pub lp: ClassMetrics,
    pub migrations: u64,
}

impl MetricsReport {
    pub fn class(&self, priority: Priority) -> &ClassMetrics {
        match priority {
            Priority::High => &self.hp,
            Priority::Low => &self.lp,
        }
    }

    pub fn dmr_hp(&self) -> f64 {
        self.hp.dmr
    }

    pub fn dmr_lp(&self) -> f64 {
        self.lp.dmr
    }
}

#[derive(Debug, Clone, Default)]
struct ClassAccumulator {
    released: u64,
    accepted: u64,
    rejected: u64,
    missed: u64,
    completed: u64,
    in_flight: u64,
    responses: Vec<f64>,
}

impl ClassAccumulator {
    fn finish(self) -> ClassMetrics {
        ClassMetrics {
            released: self.released,
            accepted: self.accepted,
            rejected: self.rejected,
            missed: self.missed,
            completed: self.completed,
            in_flight: self.in_flight,
            dmr: if self.accepted == 0 {
                0.0
            } else {
                self.missed as f64 / self.accepted as f64
            },
            response: ResponseStats::from_samples(&self.responses),
        }
    }
}

/// Streaming metrics collector fed by the engine.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    warmup: f64,
    duration: f64,
    hp: ClassAccumulator,
    lp: ClassAccumulator,
    window_completions: u64,
    migrations: u64,
}

impl MetricsAccumulator {
    pub fn new(warmup: f64, duration: f64) -> Self {
        MetricsAccumulator {
            warmup,
            duration,
            hp: ClassAccumulator::default(),
            lp: ClassAccumulator::default(),
            window_completions: 0,
            migrations: 0,
        }
    }

    pub fn warmup(&self) -> f64 {
        self.warmup
    }

    pub fn measured(&self, release_time: f64) -> bool {
        release_time >= self.warmup
    }

    fn class(&mut self, priority: Priority) -> &mut ClassAccumulator {
        match priority {
            Priority::High => &mut self.hp,
            Priority::Low => &mut self.lp,
        }
    }

    pub fn on_release(&mut self, priority: Priority, release_time: f64) {
        if self.measured(release_time) {
            self.class(priority).released += 1;
        }
    }

    pub fn on_admit(&mut self, priority: Priority, release_time: f64, migrated: bool) {
        if self.measured(release_time) {
            self.class(priority).accepted += 1;
            if migrated {
                self.migrations += 1;
            }
        }
    }

    pub fn on_reject(&mut self, priority: Priority, release_time: f64) {
        if self.measured(release_time) {
            self.class(priority).rejected += 1;
        }
    }

    pub fn on_finish(&mut self, priority: Priority, release_time: f64, deadline: f64, now: f64, batch: u32) {
        if now >= self.warmup {
            self.window_completions += batch as u64;
        }
        if self.measured(release_time) {
            let c = self.class(priority);
            c.completed += 1;
            c.responses.push(now - release_time);
            if now > deadline {
                c.missed += 1;
            }
        }
    }

    /// An accepted job still running when the run ends.
    pub fn on_unfinished(&mut self, priority: Priority, release_time: f64, deadline: f64) {
        if self.measured(release_time) {
            let duration = self.duration;
            let c = self.class(priority);
            c.in_flight += 1;
            if deadline < duration {
                c.missed += 1;
            }
        }
    }

    pub fn finish(self, mut header: MetricsReport) -> MetricsReport {
        let window = self.duration - self.warmup;
        header.duration = self.duration;
        header.warmup = self.warmup;
        header.jps = if window > 0.0 {
            self.window_completions as f64 / window
        } else {
            0.0
        };
        header.migrations = self.migrations;
        header.hp = self.hp.finish();
        header.lp = self.lp.finish();
        header
    }
}
