//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails. Bounds are asserted exactly as stated; nothing is relaxed
//! to make a line pass.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use stagesched::engine::{run, run_with, RunOptions, RunOutput, Scenario};
use stagesched::gpu::{advance_progress, allocate_rates, next_completion, water_level, ActiveStage, GpuConfig, Policy, StageRef};
use stagesched::metrics::MetricsReport;
use stagesched::model::{JobId, Priority};
use stagesched::par::{self, Execution};
use stagesched::report::emit_report;
use stagesched::scenario::{Oversubscription, ReportFormat, ScenarioConfig};
use stagesched::scheduler::Ablation;
use stagesched::sweep::{cell_config, SweepSpec};
use stagesched::timing::{ExecutionWindow, TaskTiming};

use common::*;

const PRESETS: [&str; 3] = ["resnet18_main", "unet_main", "inceptionv3_main"];
const OVERLOAD: f64 = 1.5;
const ORACLE_INSTANCES: usize = 1000;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

fn config(preset: &str, nc: u32, ns: u32, os: f64, seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.workload.preset = Some(preset.into());
    c.gpu.n_contexts = nc;
    c.gpu.n_streams = ns;
    c.gpu.oversubscription = Oversubscription::Value(os);
    c.overload = Some(OVERLOAD);
    c.seed = seed;
    c
}

fn simulate(c: &ScenarioConfig) -> MetricsReport {
    run(&c.build().expect("valid scenario")).expect("run succeeds")
}

/// Demand of one priority class in full-GPU units, computed from the task
/// parameters directly.
fn class_demand(s: &Scenario, p: Priority) -> f64 {
    let n = s.gpu.total_sms as f64;
    s.tasks
        .iter()
        .filter(|t| t.priority == p)
        .map(|t| {
            let eff = t.effective_stage_times();
            t.stages.iter().zip(eff).map(|(st, e)| e * st.width as f64 / n).sum::<f64>() / t.period
        })
        .sum()
}

fn within(limit: Duration, took: Duration) -> bool {
    took < limit
}

fn hp_safety(baseline: &mut Vec<MetricsReport>) -> Verdict {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let base = config("resnet18_main", 6, 1, 6.0, 0);
    let hp_load = class_demand(&base.build().unwrap(), Priority::High);
    let reports = par::map(Execution::best(), &seeds, |&s| simulate(&config("resnet18_main", 6, 1, 6.0, s)));
    let took = start.elapsed();
    let hp_max = reports.iter().map(|r| r.hp.dmr).fold(0.0, f64::max);
    let lp_max = reports.iter().map(|r| r.lp.dmr).fold(0.0, f64::max);
    let pass = hp_load <= 0.5 + 1e-12
        && reports.iter().all(|r| r.hp.dmr == 0.0 && r.hp.accepted > 0)
        && reports.iter().all(|r| r.lp.dmr < 0.10)
        && within(Duration::from_secs(10), took);
    *baseline = reports;
    Verdict::new(
        pass,
        format!(
            "HP load {hp_load:.3}, max HP DMR {hp_max}, max LP DMR {lp_max:.4} over 10 seeds, {:.1}s",
            took.as_secs_f64()
        ),
    )
}

fn str_timeliness() -> Verdict {
    let mut cells = Vec::new();
    for p in PRESETS {
        for ns in 2..=10 {
            cells.push((p, ns));
        }
    }
    let reports = par::map(Execution::best(), &cells, |&(p, ns)| simulate(&config(p, 1, ns, 1.0, 1)));
    let over: Vec<String> = cells
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.lp.dmr > 0.02)
        .map(|((p, ns), r)| format!("{p} 1x{ns} LP DMR {:.4}", r.lp.dmr))
        .collect();
    let worst = reports.iter().map(|r| r.lp.dmr).fold(0.0, f64::max);
    let detail = if over.is_empty() {
        format!("{} STR cells, max LP DMR {worst:.4}", cells.len())
    } else {
        format!("{} of {} STR cells above 2%: {}", over.len(), cells.len(), over.join("; "))
    };
    Verdict::new(over.is_empty(), detail)
}

fn oversubscription_trend() -> Verdict {
    let os_set = [1.0, 1.5, 2.0, 6.0];
    let mut cells = Vec::new();
    for p in PRESETS {
        for seed in 0..3u64 {
            cells.push((p, seed));
        }
    }
    let series = par::map(Execution::best(), &cells, |&(p, seed)| {
        os_set.iter().map(|&os| simulate(&config(p, 6, 1, os, seed)).jps).collect::<Vec<f64>>()
    });
    let mut problems = Vec::new();
    for ((p, seed), jps) in cells.iter().zip(&series) {
        if jps[3] <= jps[0] {
            problems.push(format!("{p} seed {seed}: JPS(OS=6) {} not > JPS(OS=1) {}", jps[3], jps[0]));
        }
        for k in 1..jps.len() {
            if jps[k] < jps[k - 1] * 0.98 {
                problems.push(format!("{p} seed {seed}: JPS drops {} -> {} at OS {}", jps[k - 1], jps[k], os_set[k]));
            }
        }
    }
    let detail = if problems.is_empty() {
        format!("{} preset/seed series over OS {{1, 1.5, 2, 6}}", cells.len())
    } else {
        problems.join("; ")
    };
    Verdict::new(problems.is_empty(), detail)
}

fn ablation_ordering() -> Verdict {
    let variants: Vec<Vec<Ablation>> = vec![
        vec![],
        vec![Ablation::NoStaging],
        vec![Ablation::NoLast],
        vec![Ablation::NoFixed],
    ];
    let reports = par::map(Execution::best(), &variants, |ab| {
        let mut c = config("resnet18_main", 6, 1, 6.0, 1);
        c.scheduler.ablations = ab.clone();
        simulate(&c)
    });
    let (baseline, staging, last, fixed) = (&reports[0], &reports[1], &reports[2], &reports[3]);
    let checks = [
        (
            staging.hp.response.mean >= baseline.hp.response.mean && staging.hp.dmr >= baseline.hp.dmr,
            format!(
                "No Staging HP mean {:.2}ms / DMR {} vs {:.2}ms / {}",
                staging.hp.response.mean * 1e3,
                staging.hp.dmr,
                baseline.hp.response.mean * 1e3,
                baseline.hp.dmr
            ),
        ),
        (
            last.hp.response.max > baseline.hp.response.max,
            format!(
                "No Last HP max {:.2}ms vs {:.2}ms",
                last.hp.response.max * 1e3,
                baseline.hp.response.max * 1e3
            ),
        ),
        (
            fixed.hp.dmr > 0.0 && baseline.hp.dmr == 0.0,
            format!(
                "No Fixed HP DMR {} (max response {:.2}ms) vs {}",
                fixed.hp.dmr,
                fixed.hp.response.max * 1e3,
                baseline.hp.dmr
            ),
        ),
    ];
    let pass = checks.iter().all(|(ok, _)| *ok);
    let detail = checks
        .iter()
        .map(|(ok, m)| format!("{}{m}", if *ok { "" } else { "[x] " }))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict::new(pass, detail)
}

fn hp_responsiveness(baseline: &[MetricsReport]) -> Verdict {
    let worst = baseline
        .iter()
        .map(|r| r.hp.response.mean / r.lp.response.mean)
        .fold(0.0, f64::max);
    let pass = !baseline.is_empty()
        && baseline
            .iter()
            .all(|r| r.lp.completed > 0 && r.hp.response.mean <= 0.5 * r.lp.response.mean);
    Verdict::new(pass, format!("worst HP/LP mean response ratio {worst:.3} over {} seeds", baseline.len()))
}

fn mret_suite() -> Result<usize, String> {
    let mut r = rng(61);
    for case in 0..ORACLE_INSTANCES {
        let ws = r.gen_range(1..=8);
        let n_stages = r.gen_range(1..=4);
        let nominal: Vec<f64> = (0..n_stages).map(|_| r.gen_range(1e-3..5e-3)).collect();
        let afet = r.gen_range(1e-3..9e-3);
        let nominal_total: f64 = nominal.iter().sum();
        // Empty windows fall back to AFET split in nominal proportions.
        let initial: Vec<f64> = nominal.iter().map(|t| afet * (t / nominal_total)).collect();
        let mut timing = TaskTiming::new(afet, &nominal, ws);
        let mut window = ExecutionWindow::new(ws).unwrap();
        let mut history: Vec<Vec<f64>> = vec![Vec::new(); n_stages];
        if (0..n_stages).any(|k| timing.mret_stage(k) != initial[k]) {
            return Err(format!("case {case}: empty-window fallback"));
        }
        for _ in 0..r.gen_range(0..30) {
            let j = r.gen_range(0..n_stages);
            // Coarse values make ties frequent.
            let v = f64::from(r.gen_range(1u32..=12)) * 0.5e-3;
            timing.record_execution(j, v).unwrap();
            history[j].push(v);
            if j == 0 {
                window.record(v).unwrap();
                if window.max() != Some(brute_mret(&history[0], ws, f64::NAN)) {
                    return Err(format!("case {case}: window max {:?}", window.max()));
                }
            }
            let mut total = 0.0;
            for (k, h) in history.iter().enumerate() {
                let expected = brute_mret(h, ws, initial[k]);
                if timing.mret_stage(k) != expected {
                    return Err(format!("case {case} stage {k}: {} vs {expected}", timing.mret_stage(k)));
                }
                total += expected;
            }
            if timing.mret_task() != total {
                return Err(format!("case {case}: task MRET {} vs {total}", timing.mret_task()));
            }
        }
    }
    Ok(ORACLE_INSTANCES)
}

fn water_suite() -> Result<usize, String> {
    let mut r = rng(62);
    let mut contended = 0;
    for case in 0..ORACLE_INSTANCES {
        let n = r.gen_range(1..=8);
        let widths: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(1u32..=68))).collect();
        let capacity = f64::from(2 * r.gen_range(1u32..=34));
        let fast = water_level(&widths, capacity);
        let slow = bisect_level(&widths, capacity);
        match (fast, slow) {
            (None, None) => {}
            (Some(a), Some(b)) if (a - b).abs() < 1e-9 => contended += 1,
            other => return Err(format!("case {case}: widths {widths:?} cap {capacity}: {other:?}")),
        }
        let contexts: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let gpu = GpuConfig::new(68, 3, 1, r.gen_range(1.0..=3.0), Policy::Mps).unwrap();
        let active: Vec<ActiveStage> = (0..n)
            .map(|i| ActiveStage {
                id: StageRef { job: JobId(i as u64), stage: 0 },
                context: contexts[i],
                width: widths[i],
                remaining_work: 1.0,
            })
            .collect();
        let got = allocate_rates(&gpu, &active);
        let want = oracle_rates(&contexts, &widths, gpu.context_sms(), 68.0);
        for (i, (a, b)) in got.rate.iter().zip(&want).enumerate() {
            if (a - b).abs() * widths[i] > 1e-9 {
                return Err(format!("case {case}: rate {i} {a} vs {b}"));
            }
        }
    }
    if contended < ORACLE_INSTANCES / 4 {
        return Err(format!("only {contended} contended cases"));
    }
    Ok(ORACLE_INSTANCES)
}

fn event_driven(jobs: &[StepJob], gpu: &GpuConfig) -> Vec<Vec<f64>> {
    let mut stage = vec![0usize; jobs.len()];
    let mut done: Vec<Vec<f64>> = jobs.iter().map(|_| Vec::new()).collect();
    let mut active: Vec<ActiveStage> = jobs
        .iter()
        .enumerate()
        .map(|(i, j)| ActiveStage {
            id: StageRef { job: JobId(i as u64), stage: 0 },
            context: j.context,
            width: j.widths[0],
            remaining_work: j.works[0],
        })
        .collect();
    let mut now = 0.0;
    while !active.is_empty() {
        let alloc = allocate_rates(gpu, &active);
        let (idx, t) = next_completion(&active, &alloc, now).unwrap();
        advance_progress(&mut active, &alloc, t - now).unwrap();
        now = t;
        let i = active[idx].id.job.0 as usize;
        done[i].push(now);
        stage[i] += 1;
        if stage[i] < jobs[i].works.len() {
            active[idx].remaining_work = jobs[i].works[stage[i]];
            active[idx].width = jobs[i].widths[stage[i]];
            active[idx].id.stage = stage[i];
        } else {
            active.remove(idx);
        }
    }
    done
}

fn integrator_suite() -> Result<usize, String> {
    let mut r = rng(63);
    let mut worst: f64 = 0.0;
    for case in 0..ORACLE_INSTANCES {
        let nc = r.gen_range(1..=3);
        let gpu = GpuConfig::new(68, nc, 2, r.gen_range(1.0..=nc as f64), if nc == 1 { Policy::Str } else { Policy::MpsStr })
            .unwrap();
        let jobs: Vec<StepJob> = (0..r.gen_range(1..=4))
            .map(|_| {
                let n = r.gen_range(1..=3);
                StepJob {
                    context: r.gen_range(0..nc as usize),
                    works: (0..n).map(|_| r.gen_range(5e-3..20e-3)).collect(),
                    widths: (0..n).map(|_| f64::from(r.gen_range(1u32..=68))).collect(),
                }
            })
            .collect();
        let exact = event_driven(&jobs, &gpu);
        let stepped = fixed_step_completions(&jobs, gpu.context_sms(), 68.0, 1e-6);
        for (a, b) in exact.iter().flatten().zip(stepped.iter().flatten()) {
            let rel = (a - b).abs() / a;
            worst = worst.max(rel);
            if rel > 1e-3 {
                return Err(format!("case {case}: completion {a} vs stepped {b}"));
            }
        }
    }
    eprintln!("  integrator worst relative error {worst:.2e}");
    Ok(ORACLE_INSTANCES)
}

fn dispatch_suite() -> Result<usize, String> {
    let mut r = rng(64);
    let mut decisions = 0usize;
    for case in 0..ORACLE_INSTANCES {
        let s = random_scenario(&mut r, 0.3);
        let out = run_with(&s, RunOptions { dispatch_trace: true, exec: Execution::Sequential, ..RunOptions::default() })
            .map_err(|e| format!("case {case}: {e}"))?;
        for d in &out.dispatches {
            let want = oracle_pick(&d.ready, &s.scheduler);
            if want.stage != d.chosen.stage {
                return Err(format!("case {case} t={}: chose {:?}, oracle {:?}", d.time, d.chosen.stage, want.stage));
            }
            decisions += 1;
        }
    }
    eprintln!("  dispatch decisions checked: {decisions}");
    Ok(ORACLE_INSTANCES)
}

fn replay_suite() -> Result<usize, String> {
    let mut r = rng(65);
    for case in 0..ORACLE_INSTANCES {
        let s = random_scenario(&mut r, 0.5);
        let out = run_with(&s, RunOptions { event_log: true, exec: Execution::Sequential, ..RunOptions::default() })
            .map_err(|e| format!("case {case}: {e}"))?;
        let bad = replay_mismatches(&replay_metrics(&out.log), &out.report);
        if !bad.is_empty() {
            return Err(format!("case {case}: {}", bad.join(", ")));
        }
    }
    Ok(ORACLE_INSTANCES)
}

type Suite = fn() -> Result<usize, String>;

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let suites: [(&str, Suite); 5] = [
        ("a MRET", mret_suite),
        ("b water-filling", water_suite),
        ("c integrator", integrator_suite),
        ("d dispatch", dispatch_suite),
        ("e replay", replay_suite),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, suite) in suites {
        match suite() {
            Ok(n) if n >= ORACLE_INSTANCES => parts.push(format!("{name} {n} ok")),
            Ok(n) => {
                pass = false;
                parts.push(format!("{name} only {n} instances"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} FAILED {e}"));
            }
        }
    }
    let took = start.elapsed();
    pass &= within(Duration::from_secs(60), took);
    Verdict::new(pass, format!("{}, {:.1}s", parts.join("; "), took.as_secs_f64()))
}

fn audited(c: &ScenarioConfig) -> (RunOutput, Vec<u8>) {
    let s = c.build().expect("valid cell");
    let out = run_with(
        &s,
        RunOptions {
            event_log: true,
            audit: true,
            exec: Execution::Sequential,
            ..RunOptions::default()
        },
    )
    .expect("run succeeds");
    let mut csv = Vec::new();
    emit_report(std::slice::from_ref(&out.report), ReportFormat::Csv, &mut csv).unwrap();
    (out, csv)
}

fn invariant_grid() -> Verdict {
    let start = Instant::now();
    let (cells, _) = SweepSpec::full_grid(vec![7]).expand().unwrap();
    let mut jobs = Vec::new();
    for p in PRESETS {
        for cell in &cells {
            let mut base = ScenarioConfig::default();
            base.workload.preset = Some(p.into());
            base.overload = Some(OVERLOAD);
            base.duration = 5.0;
            jobs.push((p, cell_config(&base, cell)));
        }
    }
    let problems = par::map(Execution::best(), &jobs, |(p, c)| {
        let (first, csv) = audited(c);
        let (second, csv_again) = audited(c);
        let mut bad: Vec<String> = first.violations.iter().take(3).cloned().collect();
        bad.extend(admission_audit(&first.log).into_iter().take(3));
        if csv != csv_again || first.log != second.log {
            bad.push("reruns differ".into());
        }
        bad.into_iter()
            .map(|m| format!("{p} {:?} {}: {m}", c.gpu.policy, c.gpu.n_contexts * 100 + c.gpu.n_streams))
            .collect::<Vec<_>>()
    });
    let problems: Vec<String> = problems.into_iter().flatten().collect();
    let took = start.elapsed();
    let pass = problems.is_empty() && cells.len() == 72 && within(Duration::from_secs(300), took);
    let detail = if problems.is_empty() {
        format!("{} cells x {} presets audited twice, {:.1}s", cells.len(), PRESETS.len(), took.as_secs_f64())
    } else {
        format!("{} violations, first: {}", problems.len(), problems[..problems.len().min(3)].join("; "))
    };
    Verdict::new(pass, detail)
}

fn hpa_behavior() -> Verdict {
    let with = |hpa: bool| {
        let mut c = config("resnet18_main", 6, 1, 6.0, 1);
        c.overload = Some(3.6);
        c.scheduler.hpa = hpa;
        c
    };
    let hp_demand = class_demand(&with(true).build().unwrap(), Priority::High);
    let on = simulate(&with(true));
    let off = simulate(&with(false));
    let pass = hp_demand > 1.0 && on.hp.dmr == 0.0 && on.hp.rejected > 0 && off.hp.dmr > 0.0;
    Verdict::new(
        pass,
        format!(
            "HP demand {hp_demand:.2}; enabled: HP DMR {} with {} rejections; disabled: HP DMR {:.4}",
            on.hp.dmr, on.hp.rejected, off.hp.dmr
        ),
    )
}

fn batching_gain() -> Verdict {
    let cases = [("resnet18_main", "resnet18", 4), ("unet_main", "unet", 2), ("inceptionv3_main", "inceptionv3", 8)];
    let gains = par::map(Execution::best(), &cases, |&(p, dnn, b)| {
        let plain = config(p, 6, 1, 6.0, 1);
        let mut batched = plain.clone();
        batched.batching.insert(dnn.into(), b);
        simulate(&batched).jps / simulate(&plain).jps
    });
    let (resnet, unet, inception) = (gains[0], gains[1], gains[2]);
    Verdict::new(
        inception > resnet && resnet > unet,
        format!("gains InceptionV3 {inception:.3}, ResNet18 {resnet:.3}, UNet {unet:.3}"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, v: Verdict| {
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    };
    let mut baseline = Vec::new();
    report("1 HP safety", hp_safety(&mut baseline));
    report("2 STR timeliness", str_timeliness());
    report("3 oversubscription trend", oversubscription_trend());
    report("4 ablation ordering", ablation_ordering());
    report("5 HP responsiveness", hp_responsiveness(&baseline));
    report("6 oracle equivalence", oracle_equivalence());
    report("7 invariant grid", invariant_grid());
    report("8 HPA behavior", hpa_behavior());
    report("9 batching gain", batching_gain());
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
