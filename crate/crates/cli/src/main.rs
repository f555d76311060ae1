//! Command-line runner: one scenario or a sweep, reported as CSV or JSON.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;

use stagesched::engine::{run_with, RunOptions};
use stagesched::gpu::Policy;
use stagesched::log::write_jsonl;
use stagesched::par::Execution;
use stagesched::report::emit_report;
use stagesched::scenario::{load_scenario, Oversubscription, ReportFormat, ScenarioConfig};
use stagesched::scheduler::Ablation;
use stagesched::sweep::{run_sweep_with, SweepSpec};

#[derive(Debug, Parser)]
#[command(name = "stagesched", version, about = "Simulate staged DNN inference scheduling on a partitioned GPU")]
struct Args {
    /// Scenario file (TOML, or JSON by extension).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Workload preset, e.g. `resnet18_main`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    /// Number of contexts.
    #[arg(long)]
    nc: Option<u32>,
    /// Streams per context.
    #[arg(long)]
    ns: Option<u32>,
    /// Oversubscription, a number or `nc`.
    #[arg(long)]
    os: Option<Oversubscription>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// May be repeated.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Vec<Ablation>,
    /// Apply the admission test to HP jobs as well.
    #[arg(long)]
    hpa: bool,
    /// Aggregate demand as a multiple of GPU capacity.
    #[arg(long)]
    overload: Option<f64>,
    /// Sweep file; runs every cell against the scenario.
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON Lines event log of a single run.
    #[arg(long)]
    emit_event_log: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse()
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

fn apply_overrides(config: &mut ScenarioConfig, args: &Args) {
    if let Some(p) = &args.preset {
        config.workload.preset = Some(p.clone());
    }
    if let Some(p) = args.policy {
        config.gpu.policy = Some(p);
    }
    if let Some(nc) = args.nc {
        config.gpu.n_contexts = nc;
    }
    if let Some(ns) = args.ns {
        config.gpu.n_streams = ns;
    }
    if let Some(os) = args.os {
        config.gpu.oversubscription = os;
    }
    if let Some(d) = args.duration {
        config.duration = d;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    for a in &args.ablation {
        if !config.scheduler.ablations.contains(a) {
            config.scheduler.ablations.push(*a);
        }
    }
    if args.hpa {
        config.scheduler.hpa = true;
    }
    if let Some(f) = args.overload {
        config.overload = Some(f);
    }
}

fn open_out(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn execute(args: Args) -> Result<()> {
    let mut config = match &args.scenario {
        Some(path) => load_scenario(path).with_context(|| format!("loading {}", path.display()))?,
        None => ScenarioConfig::default(),
    };
    apply_overrides(&mut config, &args);
    config.validate()?;
    let w = &config.workload;
    if w.preset.is_none() && w.groups.is_empty() && w.tasks.is_empty() {
        bail!("no workload: pass --preset or a scenario with a [workload] section");
    }
    let format = args.format.or(config.output.format).unwrap_or_default();
    let out_path = args.out.clone().or_else(|| config.output.report.clone());
    let log_path = args.emit_event_log.clone().or_else(|| config.output.event_log.clone());

    let reports = match &args.sweep {
        Some(path) => {
            if log_path.is_some() {
                bail!("--emit-event-log applies to single runs, not sweeps");
            }
            let spec = SweepSpec::load(path).with_context(|| format!("loading {}", path.display()))?;
            let outcome = run_sweep_with(&spec, &config, Execution::best())?;
            for s in &outcome.skipped {
                eprintln!(
                    "skipped {} {} × {} OS {}: {}",
                    s.policy, s.n_contexts, s.n_streams, s.oversubscription, s.reason
                );
            }
            outcome.reports
        }
        None => {
            let scenario = config.build()?;
            let output = run_with(
                &scenario,
                RunOptions {
                    event_log: log_path.is_some(),
                    exec: Execution::best(),
                    ..RunOptions::default()
                },
            )?;
            if let Some(p) = &log_path {
                let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
                write_jsonl(BufWriter::new(file), &output.log)?;
            }
            vec![output.report]
        }
    };
    emit_report(&reports, format, open_out(out_path.as_ref())?)?;
    Ok(())
}

fn main() -> ExitCode {
    match execute(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
