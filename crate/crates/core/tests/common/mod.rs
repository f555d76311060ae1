//! Independent oracles shared by the integration suites. Nothing here calls
//! into the code it checks except to obtain inputs.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stagesched::engine::{PhaseMode, Scenario, SimParams};
use stagesched::gpu::{BatchingCurve, GpuConfig, Policy};
use stagesched::log::{EventKind, LogRecord};
use stagesched::metrics::MetricsReport;
use stagesched::model::{build_task_set, BatchProfile, Priority, StageProfile, TaskId, TaskSpec};
use stagesched::scheduler::{AblationFlags, EdfKey, ReadyEntry, SchedulerConfig, SchedulerMode};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest of the last `ws` samples, or `initial` when there are none.
pub fn brute_mret(samples: &[f64], ws: usize, initial: f64) -> f64 {
    let tail = &samples[samples.len().saturating_sub(ws)..];
    let mut best = f64::NEG_INFINITY;
    for &s in tail {
        if s > best {
            best = s;
        }
    }
    if tail.is_empty() {
        initial
    } else {
        best
    }
}

/// Water level by bisection on `Σ min(w, λ) = capacity`; `None` when the
/// widths fit.
pub fn bisect_level(widths: &[f64], capacity: f64) -> Option<f64> {
    if widths.iter().sum::<f64>() <= capacity {
        return None;
    }
    let filled = |l: f64| widths.iter().map(|w| w.min(l)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, widths.iter().cloned().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if filled(mid) < capacity {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Rates of a running set from first principles: bisection per context, then
/// a common cap at the physical SM count.
pub fn oracle_rates(contexts: &[usize], widths: &[f64], context_sms: f64, total_sms: f64) -> Vec<f64> {
    let mut alloc = vec![0.0; widths.len()];
    let mut seen = Vec::new();
    for &c in contexts {
        if seen.contains(&c) {
            continue;
        }
        seen.push(c);
        let members: Vec<usize> = (0..widths.len()).filter(|&i| contexts[i] == c).collect();
        let ws: Vec<f64> = members.iter().map(|&i| widths[i]).collect();
        let level = bisect_level(&ws, context_sms);
        for &i in &members {
            alloc[i] = level.map_or(widths[i], |l| widths[i].min(l));
        }
    }
    let sum: f64 = alloc.iter().sum();
    let scale = if sum > total_sms { total_sms / sum } else { 1.0 };
    alloc.iter().zip(widths).map(|(a, w)| (a * scale / w).min(1.0)).collect()
}

/// One job on the fixed-step integrator: stages run back to back on the
/// job's context.
#[derive(Debug, Clone)]
pub struct StepJob {
    pub context: usize,
    pub works: Vec<f64>,
    pub widths: Vec<f64>,
}

/// Completion time of every stage of every job, integrated with step `dt`.
/// Rates are recomputed only when the running set changes.
pub fn fixed_step_completions(jobs: &[StepJob], context_sms: f64, total_sms: f64, dt: f64) -> Vec<Vec<f64>> {
    let mut stage = vec![0usize; jobs.len()];
    let mut left: Vec<f64> = jobs.iter().map(|j| j.works[0]).collect();
    let mut done: Vec<Vec<f64>> = jobs.iter().map(|_| Vec::new()).collect();
    let mut rates: Vec<f64> = Vec::new();
    let mut dirty = true;
    let mut step: u64 = 0;
    loop {
        let running: Vec<usize> = (0..jobs.len()).filter(|&i| stage[i] < jobs[i].works.len()).collect();
        if running.is_empty() {
            return done;
        }
        if dirty {
            let ctx: Vec<usize> = running.iter().map(|&i| jobs[i].context).collect();
            let ws: Vec<f64> = running.iter().map(|&i| jobs[i].widths[stage[i]]).collect();
            rates = oracle_rates(&ctx, &ws, context_sms, total_sms);
            dirty = false;
        }
        step += 1;
        let t = step as f64 * dt;
        for (k, &i) in running.iter().enumerate() {
            left[i] -= rates[k] * dt;
            if left[i] <= 0.0 {
                done[i].push(t);
                stage[i] += 1;
                if stage[i] < jobs[i].works.len() {
                    left[i] = jobs[i].works[stage[i]];
                }
                dirty = true;
            }
        }
    }
}

/// Level of a ready stage computed from its raw attributes.
pub fn oracle_level(priority: Priority, is_last: bool, missed: bool, flags: &AblationFlags) -> u8 {
    if flags.no_fixed {
        return 0;
    }
    let mut level = 0;
    if priority == Priority::Low {
        level += 4;
    }
    if !(is_last && !flags.no_last) {
        level += 2;
    }
    if !(missed && !flags.no_prior) {
        level += 1;
    }
    level
}

/// The stage a full sort of `ready` puts first.
pub fn oracle_pick(ready: &[ReadyEntry], config: &SchedulerConfig) -> ReadyEntry {
    let mut sorted = ready.to_vec();
    sorted.sort_by(|a, b| {
        let key = |e: &ReadyEntry| {
            let raw = &e.attrs;
            let level = oracle_level(raw.attrs.priority, raw.attrs.is_last, raw.attrs.predecessor_missed, &config.ablations);
            let deadline = match config.edf_key {
                EdfKey::Stage => raw.virtual_abs_deadline,
                EdfKey::Job => raw.absolute_deadline,
            };
            (level, deadline, e.key.task_id, e.stage.job)
        };
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0)
            .then(ka.1.partial_cmp(&kb.1).expect("finite deadlines"))
            .then(ka.2.cmp(&kb.2))
            .then(ka.3.cmp(&kb.3))
    });
    sorted[0]
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct ClassReplay {
    pub released: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub missed: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub dmr: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub p95: f64,
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Replay {
    pub hp: ClassReplay,
    pub lp: ClassReplay,
    pub jps: f64,
    pub migrations: u64,
}

/// Recomputes the report's metrics from the event log alone.
pub fn replay_metrics(log: &[LogRecord]) -> Replay {
    let end = log.iter().find(|r| r.kind == EventKind::End).expect("log ends with end");
    let warmup = end.warmup.expect("end carries warmup");
    let duration = end.duration.expect("end carries duration");
    let mut releases: HashMap<u64, (f64, Priority, f64)> = HashMap::new();
    let mut admitted: HashMap<u64, bool> = HashMap::new();
    let mut out = Replay::default();
    let mut samples: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut window_jobs = 0u64;
    let slot = |p: Priority| usize::from(p == Priority::Low);

    for r in log {
        let job = r.job;
        match r.kind {
            EventKind::Release => {
                let p = r.priority.expect("release carries priority");
                releases.insert(job.unwrap(), (r.time, p, r.deadline.unwrap()));
                if r.time >= warmup {
                    class(&mut out, p).released += 1;
                }
            }
            EventKind::Admit | EventKind::Reject => {
                let (at, p, _) = releases[&job.unwrap()];
                if r.kind == EventKind::Admit {
                    admitted.insert(job.unwrap(), false);
                }
                if at < warmup {
                    continue;
                }
                if r.kind == EventKind::Admit {
                    class(&mut out, p).accepted += 1;
                    if r.from_context.is_some() {
                        out.migrations += 1;
                    }
                } else {
                    class(&mut out, p).rejected += 1;
                }
            }
            EventKind::Finish => {
                let (at, p, deadline) = releases[&job.unwrap()];
                admitted.insert(job.unwrap(), true);
                if r.time >= warmup {
                    window_jobs += u64::from(r.batch.unwrap_or(1));
                }
                if at >= warmup {
                    let c = class(&mut out, p);
                    c.completed += 1;
                    if r.time > deadline {
                        c.missed += 1;
                    }
                    samples[slot(p)].push(r.time - at);
                }
            }
            _ => {}
        }
    }
    for (job, finished) in &admitted {
        let (at, p, deadline) = releases[job];
        if !finished && at >= warmup {
            let c = class(&mut out, p);
            c.in_flight += 1;
            if deadline < duration {
                c.missed += 1;
            }
        }
    }
    let [hp_samples, lp_samples] = samples;
    for (p, mut xs) in [(Priority::High, hp_samples), (Priority::Low, lp_samples)] {
        let c = class(&mut out, p);
        c.dmr = if c.accepted == 0 { 0.0 } else { c.missed as f64 / c.accepted as f64 };
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        let mut sum = 0.0;
        for x in &xs {
            sum += x;
        }
        c.mean = sum / n as f64;
        c.min = xs[0];
        c.max = xs[n - 1];
        // Smallest sample with at least 95% of the samples at or below it.
        let mut k = 0;
        while (k + 1) * 100 < 95 * n {
            k += 1;
        }
        c.p95 = xs[k];
    }
    let window = duration - warmup;
    out.jps = if window > 0.0 { window_jobs as f64 / window } else { 0.0 };
    out
}

fn class(r: &mut Replay, p: Priority) -> &mut ClassReplay {
    match p {
        Priority::High => &mut r.hp,
        Priority::Low => &mut r.lp,
    }
}

/// Differences between a replay and the engine's report, empty when equal.
pub fn replay_mismatches(replay: &Replay, report: &MetricsReport) -> Vec<String> {
    let mut bad = Vec::new();
    for (name, c, m) in [("hp", &replay.hp, &report.hp), ("lp", &replay.lp, &report.lp)] {
        let pairs = [
            ("released", c.released, m.released),
            ("accepted", c.accepted, m.accepted),
            ("rejected", c.rejected, m.rejected),
            ("missed", c.missed, m.missed),
            ("completed", c.completed, m.completed),
            ("in_flight", c.in_flight, m.in_flight),
        ];
        for (field, a, b) in pairs {
            if a != b {
                bad.push(format!("{name}.{field}: replay {a} vs report {b}"));
            }
        }
        let floats = [
            ("dmr", c.dmr, m.dmr),
            ("mean", c.mean, m.response.mean),
            ("min", c.min, m.response.min),
            ("max", c.max, m.response.max),
            ("p95", c.p95, m.response.p95),
        ];
        for (field, a, b) in floats {
            if a.to_bits() != b.to_bits() {
                bad.push(format!("{name}.{field}: replay {a} vs report {b}"));
            }
        }
    }
    if replay.jps.to_bits() != report.jps.to_bits() {
        bad.push(format!("jps: replay {} vs report {}", replay.jps, report.jps));
    }
    if replay.migrations != report.migrations {
        bad.push(format!("migrations: replay {} vs report {}", replay.migrations, report.migrations));
    }
    bad
}

/// Admission audit over a log: every started job was admitted first, and
/// every tested admission had `lhs < rhs`.
pub fn admission_audit(log: &[LogRecord]) -> Vec<String> {
    let mut admitted: HashMap<u64, Priority> = HashMap::new();
    let mut bad = Vec::new();
    for r in log {
        match r.kind {
            EventKind::Admit => {
                let p = r.priority.expect("admit carries priority");
                match (r.lhs, r.rhs) {
                    (Some(l), Some(h)) if l >= h => {
                        bad.push(format!("t={}: job {:?} admitted with {l} >= {h}", r.time, r.job))
                    }
                    (None, _) | (_, None) if p == Priority::Low => {
                        bad.push(format!("t={}: LP job {:?} admitted untested", r.time, r.job))
                    }
                    _ => {}
                }
                admitted.insert(r.job.unwrap(), p);
            }
            EventKind::Reject => {
                if let (Some(l), Some(h)) = (r.lhs, r.rhs) {
                    if l < h {
                        bad.push(format!("t={}: job {:?} rejected although {l} < {h}", r.time, r.job));
                    }
                }
            }
            EventKind::Start if !admitted.contains_key(&r.job.unwrap()) => {
                bad.push(format!("t={}: job {:?} started without admission", r.time, r.job));
            }
            _ => {}
        }
    }
    bad
}

/// A small random scenario for oracle and invariant runs.
pub fn random_scenario(r: &mut impl Rng, duration: f64) -> Scenario {
    let total_sms = *[16u32, 32, 68].get(r.gen_range(0..3)).unwrap();
    let policy = [Policy::Str, Policy::Mps, Policy::MpsStr][r.gen_range(0..3)];
    let (nc, ns) = match policy {
        Policy::Str => (1, r.gen_range(1..=4)),
        Policy::Mps => (r.gen_range(1..=4), 1),
        Policy::MpsStr => (r.gen_range(2..=3), r.gen_range(2..=3)),
    };
    let os = if nc == 1 { 1.0 } else { r.gen_range(1.0..=nc as f64) };
    let gpu = GpuConfig::new(total_sms, nc, ns, os, policy).unwrap();
    let n_tasks = r.gen_range(1..=8);
    let specs = (0..n_tasks)
        .map(|i| {
            let n_stages = r.gen_range(1..=4);
            let stages = (0..n_stages)
                .map(|_| StageProfile {
                    nominal_time: r.gen_range(0.5e-3..4e-3),
                    width: r.gen_range(1..=total_sms),
                })
                .collect::<Vec<_>>();
            let priority = if r.gen_bool(0.4) { Priority::High } else { Priority::Low };
            let period = r.gen_range(10e-3..60e-3);
            let spec = TaskSpec::new(TaskId(i + 1), period, priority, stages).unwrap();
            if r.gen_bool(0.2) {
                spec.with_batch(BatchProfile {
                    size: r.gen_range(1..=4),
                    curve: BatchingCurve {
                        reference_batch: 4,
                        reference_gain: 1.5,
                    },
                })
            } else {
                spec
            }
        })
        .collect();
    let scheduler = SchedulerConfig {
        ablations: AblationFlags {
            no_staging: r.gen_bool(0.15),
            no_last: r.gen_bool(0.15),
            no_prior: r.gen_bool(0.15),
            no_fixed: r.gen_bool(0.15),
        },
        mode: SchedulerMode {
            hpa_enabled: r.gen_bool(0.3),
        },
        edf_key: if r.gen_bool(0.2) { EdfKey::Job } else { EdfKey::Stage },
        ..SchedulerConfig::default()
    };
    Scenario {
        gpu,
        tasks: build_task_set(specs).unwrap(),
        params: SimParams {
            duration,
            seed: r.gen(),
            afet_repetitions: 2,
            phase_mode: if r.gen_bool(0.2) { PhaseMode::Zero } else { PhaseMode::Random },
            ..SimParams::default()
        },
        scheduler,
    }
}
