//! Simulated GPU: SM partitioning, the rate model and progress integration.
//!
//! Every running stage progresses at `rate = allocated / width`, where
//! `allocated` comes from a two-level water-filling:
//!
//! 1. Inside a context, its `N_SM` SMs are max-min shared among the stages it
//!    hosts, each capped at its width.
//! 2. Across contexts, if the level-1 totals exceed the physical SM count
//!    (possible once contexts oversubscribe), every allocation is scaled down
//!    by the same factor.
//!
//! Between events the allocation is constant, so stage completions can be
//! computed exactly.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JobId, StageProfile};

/// Tolerance for remaining work going negative during integration (seconds).
pub const OVERSHOOT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpuError {
    #[error("oversubscription {os} outside [1, {n_contexts}]")]
    InvalidOversubscription { os: f64, n_contexts: u32 },
    #[error("invalid GPU configuration: {0}")]
    InvalidConfig(String),
    #[error("no active stages")]
    NoActiveStages,
    #[error("stage {stage:?} would overshoot completion by {by:e} s")]
    OvershootBeyondCompletion { stage: StageRef, by: f64 },
    #[error("invalid batch size {0}")]
    InvalidBatch(u32),
}

/// Partitioning policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    /// One context, several streams.
    #[serde(rename = "str")]
    Str,
    /// Several contexts with one stream each.
    #[serde(rename = "mps")]
    Mps,
    /// Several contexts with several streams each.
    #[serde(rename = "mps-str")]
    MpsStr,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Str => "STR",
            Policy::Mps => "MPS",
            Policy::MpsStr => "MPS+STR",
        })
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "str" => Ok(Policy::Str),
            "mps" => Ok(Policy::Mps),
            "mps-str" | "mps+str" | "mps_str" => Ok(Policy::MpsStr),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuConfig {
    pub total_sms: u32,
    pub n_contexts: u32,
    pub n_streams: u32,
    pub oversubscription: f64,
    pub policy: Policy,
    pub interference_kappa: f64,
}

/// Contexts are tracked in 64-bit masks.
pub const MAX_CONTEXTS: u32 = 64;

impl GpuConfig {
    pub fn new(
        total_sms: u32,
        n_contexts: u32,
        n_streams: u32,
        oversubscription: f64,
        policy: Policy,
    ) -> Result<Self, GpuError> {
        let cfg = GpuConfig {
            total_sms,
            n_contexts,
            n_streams,
            oversubscription,
            policy,
            interference_kappa: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self, GpuError> {
        self.interference_kappa = kappa;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GpuError> {
        let bad = |m: &str| Err(GpuError::InvalidConfig(m.to_string()));
        if self.total_sms == 0 {
            return bad("total_sms must be >= 1");
        }
        if self.n_contexts == 0 || self.n_contexts > MAX_CONTEXTS {
            return bad("n_contexts must be in [1, 64]");
        }
        if self.n_streams == 0 {
            return bad("n_streams must be >= 1");
        }
        if !(self.interference_kappa.is_finite() && self.interference_kappa >= 0.0) {
            return bad("kappa must be a finite non-negative number");
        }
        match self.policy {
            Policy::Str if self.n_contexts != 1 => return bad("STR requires exactly one context"),
            Policy::Mps if self.n_streams != 1 => return bad("MPS requires one stream per context"),
            _ => {}
        }
        let os = self.oversubscription;
        if !(os.is_finite() && os >= 1.0 && os <= self.n_contexts as f64) {
            return Err(GpuError::InvalidOversubscription {
                os,
                n_contexts: self.n_contexts,
            });
        }
        Ok(())
    }

    /// Maximum number of concurrently running stages, `N_c * N_s`.
    pub fn parallelism(&self) -> u32 {
        self.n_contexts * self.n_streams
    }

    /// `N_SM` of every context as a real number for the rate model.
    pub fn context_sms(&self) -> f64 {
        sm_per_context(self).expect("validated config") as f64
    }

    /// Configuration label `N_c × N_s_OS`.
    pub fn label(&self) -> String {
        config_label(self.n_contexts, self.n_streams, self.oversubscription)
    }
}

fn format_os(os: f64) -> String {
    if os.fract() == 0.0 {
        format!("{}", os as i64)
    } else {
        format!("{os}")
    }
}

pub fn config_label(n_contexts: u32, n_streams: u32, os: f64) -> String {
    format!("{n_contexts} × {n_streams}_{}", format_os(os))
}

/// Inverse of [`config_label`].
pub fn parse_config_label(label: &str) -> Option<(u32, u32, f64)> {
    let (nc, rest) = label.split_once(" × ")?;
    let (ns, os) = rest.split_once('_')?;
    Some((nc.trim().parse().ok()?, ns.trim().parse().ok()?, os.trim().parse().ok()?))
}

/// SMs per context: `OS * N_SM,max / N_c` rounded up to the next even number.
pub fn sm_per_context(cfg: &GpuConfig) -> Result<u32, GpuError> {
    let os = cfg.oversubscription;
    if !(os >= 1.0 && os <= cfg.n_contexts as f64) {
        return Err(GpuError::InvalidOversubscription {
            os,
            n_contexts: cfg.n_contexts,
        });
    }
    let share = os * cfg.total_sms as f64 / cfg.n_contexts as f64;
    // Absorb representation error so 34.000000000001 stays 34.
    let mut sms = (share - 1e-9).ceil().max(1.0) as u32;
    if sms % 2 == 1 {
        sms += 1;
    }
    Ok(sms)
}

/// Identity of one stage of one job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageRef {
    pub job: JobId,
    pub stage: usize,
}

/// A running stage as seen by the rate model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveStage {
    pub id: StageRef,
    pub context: usize,
    pub width: f64,
    /// Seconds of work left at full width.
    pub remaining_work: f64,
}

/// Per-stage SM allocation, index-aligned with the active slice it was
/// computed for.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateAllocation {
    pub allocated: Vec<f64>,
    pub rate: Vec<f64>,
    /// Level-2 factor applied to every allocation (1 when uncontended).
    pub scale: f64,
}

impl RateAllocation {
    pub fn total_allocated(&self) -> f64 {
        self.allocated.iter().sum()
    }
}

/// Maps the running set to progress rates.
pub trait RateModel: Send + Sync {
    fn allocate(&self, gpu: &GpuConfig, active: &[ActiveStage]) -> RateAllocation;

    /// As [`RateModel::allocate`], reusing the buffers of `out`.
    fn allocate_into(&self, gpu: &GpuConfig, active: &[ActiveStage], out: &mut RateAllocation) {
        *out = self.allocate(gpu, active);
    }
}

/// The default two-level water-filling model.
#[derive(Debug, Clone, Copy, Default)]
pub struct WaterFilling;

impl RateModel for WaterFilling {
    fn allocate(&self, gpu: &GpuConfig, active: &[ActiveStage]) -> RateAllocation {
        allocate_rates(gpu, active)
    }

    fn allocate_into(&self, gpu: &GpuConfig, active: &[ActiveStage], out: &mut RateAllocation) {
        allocate_rates_into(gpu, active, out);
    }
}

/// Water level `λ` with `Σ min(width, λ) = capacity`, or `None` when the
/// widths fit (every stage then gets its full width).
pub fn water_level(widths: &[f64], capacity: f64) -> Option<f64> {
    let demand: f64 = widths.iter().sum();
    if demand <= capacity {
        return None;
    }
    let mut sorted = widths.to_vec();
    Some(level_of_sorted(&mut sorted, capacity))
}

/// Sorts `widths` in place; the caller has checked that they overflow.
fn level_of_sorted(widths: &mut [f64], capacity: f64) -> f64 {
    widths.sort_by(f64::total_cmp);
    let mut left = capacity;
    let n = widths.len();
    for (i, w) in widths.iter().enumerate() {
        let share = left / (n - i) as f64;
        if *w >= share {
            return share;
        }
        left -= w;
    }
    // Unreachable when demand > capacity; keep the largest width as a bound.
    widths[n - 1]
}

pub fn allocate_rates(gpu: &GpuConfig, active: &[ActiveStage]) -> RateAllocation {
    let mut out = RateAllocation::default();
    allocate_rates_into(gpu, active, &mut out);
    out
}

const INLINE_GROUP: usize = 16;

pub fn allocate_rates_into(gpu: &GpuConfig, active: &[ActiveStage], out: &mut RateAllocation) {
    let capacity = gpu.context_sms();
    let n = active.len();
    let allocated = &mut out.allocated;
    // Holds the co-located count until the rates are written.
    let colocated = &mut out.rate;
    allocated.clear();
    allocated.resize(n, 0.0);
    colocated.clear();
    colocated.resize(n, 0.0);

    let mut inline = [0.0; INLINE_GROUP];
    let mut spill = Vec::new();
    for i in 0..n {
        let ctx = active[i].context;
        if active[..i].iter().any(|a| a.context == ctx) {
            continue;
        }
        let members = || (i..n).filter(move |&j| active[j].context == ctx);
        let count = members().count();
        let demand: f64 = members().map(|j| active[j].width).sum();
        let level = (demand > capacity).then(|| {
            let widths: &mut [f64] = if count <= INLINE_GROUP {
                &mut inline[..count]
            } else {
                spill.resize(count, 0.0);
                &mut spill[..]
            };
            for (slot, j) in widths.iter_mut().zip(members()) {
                *slot = active[j].width;
            }
            level_of_sorted(widths, capacity)
        });
        for j in members() {
            let w = active[j].width;
            allocated[j] = level.map_or(w, |l| w.min(l));
            colocated[j] = count as f64;
        }
    }

    let total: f64 = allocated.iter().sum();
    let physical = gpu.total_sms as f64;
    let scale = if total > physical { physical / total } else { 1.0 };
    if scale < 1.0 {
        for a in allocated.iter_mut() {
            *a *= scale;
        }
    }

    let kappa = gpu.interference_kappa;
    for ((r, s), a) in out.rate.iter_mut().zip(active).zip(&out.allocated) {
        let m = *r;
        let base = (a / s.width).min(1.0);
        *r = if kappa > 0.0 { base / (1.0 + kappa * (m - 1.0)) } else { base };
    }
    out.scale = scale;
}

/// The stage that finishes first under `allocation` and its finish time.
/// Ties go to the lower `(job, stage)`.
pub fn next_completion(
    active: &[ActiveStage],
    allocation: &RateAllocation,
    now: f64,
) -> Result<(usize, f64), GpuError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in active.iter().enumerate() {
        let t = now + s.remaining_work / allocation.rate[i];
        best = match best {
            None => Some((i, t)),
            Some((bi, bt)) => {
                if t < bt || (t == bt && s.id < active[bi].id) {
                    Some((i, t))
                } else {
                    Some((bi, bt))
                }
            }
        };
    }
    best.ok_or(GpuError::NoActiveStages)
}

/// Integrates every running stage forward by `dt` at its current rate.
pub fn advance_progress(
    active: &mut [ActiveStage],
    allocation: &RateAllocation,
    dt: f64,
) -> Result<(), GpuError> {
    if dt == 0.0 {
        return Ok(());
    }
    for (i, s) in active.iter().enumerate() {
        let left = s.remaining_work - allocation.rate[i] * dt;
        if left < -OVERSHOOT_TOLERANCE {
            return Err(GpuError::OvershootBeyondCompletion { stage: s.id, by: -left });
        }
    }
    for (i, s) in active.iter_mut().enumerate() {
        s.remaining_work = (s.remaining_work - allocation.rate[i] * dt).max(0.0);
    }
    Ok(())
}

/// Batching gain curve: 1 at batch 1, `reference_gain` at `reference_batch`,
/// log-linear in between and flat beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchingCurve {
    pub reference_batch: u32,
    pub reference_gain: f64,
}

impl BatchingCurve {
    pub const NONE: BatchingCurve = BatchingCurve {
        reference_batch: 1,
        reference_gain: 1.0,
    };

    pub fn gain(&self, batch: u32) -> f64 {
        if batch <= 1 || self.reference_batch <= 1 || self.reference_gain <= 1.0 {
            return 1.0;
        }
        if batch >= self.reference_batch {
            return self.reference_gain;
        }
        let x = (batch as f64).ln() / (self.reference_batch as f64).ln();
        (self.reference_gain.ln() * x).exp()
    }
}

/// Full-width service time of a stage processing a batch of `batch` inputs.
pub fn effective_stage_time(
    profile: &StageProfile,
    batch: u32,
    curve: &BatchingCurve,
) -> Result<f64, GpuError> {
    if batch == 0 {
        return Err(GpuError::InvalidBatch(batch));
    }
    Ok(profile.nominal_time * batch as f64 / curve.gain(batch))
}
