//! Discrete-event simulation of one scenario.
//!
//! A run has an offline phase (AFET measurement, context population, release
//! phases) followed by an event loop over job releases and stage completions.
//! Releases are processed before completions at equal times; nothing happens
//! after `duration`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpu::{
    advance_progress, next_completion, ActiveStage, GpuConfig, GpuError, RateAllocation, RateModel,
    StageRef, WaterFilling,
};
use crate::log::{EventKind, LogRecord};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{make_job, Job, JobId, ModelError, Priority, StageState, TaskSet, TaskSpec, TaskState};
use crate::par::{self, Execution};
use crate::scheduler::{
    admit_or_migrate, context_utilizations, on_stage_complete, populate_contexts, predicted_finish_time,
    remaining_mret, Placement, ReadyEntry, ReadyQueue, SchedulerConfig, StageOutcome, TaskLoad,
};
use crate::timing::{measure_afet, TaskTiming, DEFAULT_AFET_REPETITIONS, DEFAULT_WINDOW_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gpu(#[from] GpuError),
}

/// How release phases are chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseMode {
    /// Uniform in `[0, T_i)` from the run seed.
    #[default]
    Random,
    /// Every task releases at 0 (synchronous burst).
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub duration: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub window_size: usize,
    pub afet_repetitions: usize,
    pub phase_mode: PhaseMode,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            duration: 60.0,
            warmup_fraction: 0.1,
            seed: 0,
            window_size: DEFAULT_WINDOW_SIZE,
            afet_repetitions: DEFAULT_AFET_REPETITIONS,
            phase_mode: PhaseMode::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub gpu: GpuConfig,
    pub tasks: TaskSet,
    pub params: SimParams,
    pub scheduler: SchedulerConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub event_log: bool,
    /// Check runtime invariants after every event and report violations.
    pub audit: bool,
    /// Record the full ready queue at every dispatch.
    pub dispatch_trace: bool,
    /// Used for the offline AFET measurements.
    pub exec: Execution,
}

/// One dispatch decision together with the queue it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchRecord {
    pub time: f64,
    pub context: usize,
    pub ready: Vec<ReadyEntry>,
    pub chosen: ReadyEntry,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub log: Vec<LogRecord>,
    pub violations: Vec<String>,
    pub dispatches: Vec<DispatchRecord>,
    /// Offline context of every task, by task index.
    pub initial_contexts: Vec<usize>,
    pub afets: Vec<f64>,
}

pub fn run(scenario: &Scenario) -> Result<MetricsReport, EngineError> {
    Ok(run_with(scenario, RunOptions::default())?.report)
}

pub fn run_with(scenario: &Scenario, options: RunOptions) -> Result<RunOutput, EngineError> {
    validate(scenario)?;
    let header = report_header(scenario);
    let p = &scenario.params;
    if scenario.tasks.is_empty() {
        let report = MetricsAccumulator::new(p.duration * p.warmup_fraction, p.duration).finish(header);
        return Ok(RunOutput {
            report,
            ..RunOutput::default()
        });
    }
    let tasks = if scenario.scheduler.ablations.no_staging {
        scenario.tasks.map_tasks(TaskSpec::collapsed)
    } else {
        scenario.tasks.clone()
    };
    let mut sim = Simulation::new(scenario, &tasks, options);
    sim.run()?;
    Ok(sim.finish(header))
}

fn validate(scenario: &Scenario) -> Result<(), EngineError> {
    scenario.gpu.validate()?;
    let p = &scenario.params;
    let bad = |m: String| Err(EngineError::InvalidScenario(m));
    if !(p.duration.is_finite() && p.duration > 0.0) {
        return bad(format!("duration {} must be > 0", p.duration));
    }
    if !(0.0..1.0).contains(&p.warmup_fraction) {
        return bad(format!("warmup_fraction {} outside [0, 1)", p.warmup_fraction));
    }
    if p.window_size == 0 {
        return bad("window_size must be >= 1".into());
    }
    for t in scenario.tasks.iter() {
        for (j, s) in t.stages.iter().enumerate() {
            if s.width > scenario.gpu.total_sms {
                return bad(format!(
                    "task {} stage {j}: width {} exceeds {} SMs",
                    t.id, s.width, scenario.gpu.total_sms
                ));
            }
        }
        if t.batch.size == 0 {
            return bad(format!("task {}: batch size must be >= 1", t.id));
        }
    }
    Ok(())
}

fn report_header(scenario: &Scenario) -> MetricsReport {
    let g = &scenario.gpu;
    MetricsReport {
        config_label: g.label(),
        policy: Some(g.policy),
        n_contexts: g.n_contexts,
        n_streams: g.n_streams,
        oversubscription: g.oversubscription,
        seed: scenario.params.seed,
        ..MetricsReport::default()
    }
}

/// Independent per-task seed derived from the run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Aggregate demand in full-GPU units: `Σ_i Σ_j time_ij · width_ij / N / T_i`.
pub fn aggregate_demand(tasks: &TaskSet, total_sms: u32) -> f64 {
    tasks
        .iter()
        .map(|t| {
            let work: f64 = t
                .effective_stage_times()
                .iter()
                .zip(&t.stages)
                .map(|(time, s)| time * s.width as f64 / total_sms as f64)
                .sum();
            work / t.period
        })
        .sum()
}

/// Rescales every period by one common factor so that the aggregate demand
/// equals `factor` times the GPU's capacity.
pub fn scale_to_overload(tasks: &TaskSet, factor: f64, total_sms: u32) -> Result<TaskSet, EngineError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(EngineError::InvalidScenario(format!("overload factor {factor} must be > 0")));
    }
    if tasks.is_empty() {
        return Ok(tasks.clone());
    }
    let ratio = aggregate_demand(tasks, total_sms) / factor;
    Ok(tasks.map_tasks(|t| {
        let period = t.period * ratio;
        TaskSpec {
            period,
            deadline: period,
            ..t.clone()
        }
    }))
}

struct Simulation<'a> {
    gpu: GpuConfig,
    config: SchedulerConfig,
    tasks: &'a TaskSet,
    duration: f64,
    options: RunOptions,
    rate_model: WaterFilling,

    states: Vec<TaskState>,
    initial_contexts: Vec<usize>,
    afets: Vec<f64>,
    phases: Vec<f64>,
    release_count: Vec<u64>,
    next_job: u64,
    jobs: Vec<Option<Job>>,
    /// In-flight admitted jobs per (task, context).
    inflight: Vec<Vec<u32>>,
    /// Kept in step with `states` and `inflight`.
    loads: Vec<TaskLoad>,
    context_jobs: Vec<BTreeSet<JobId>>,
    queues: Vec<ReadyQueue>,
    streams: Vec<Vec<Option<StageRef>>>,
    active: Vec<ActiveStage>,
    active_stream: Vec<u32>,
    allocation: RateAllocation,
    now: f64,

    metrics: MetricsAccumulator,
    log: Vec<LogRecord>,
    pending_starts: Vec<(usize, StageRef)>,
    violations: Vec<String>,
    dispatches: Vec<DispatchRecord>,
}

impl<'a> Simulation<'a> {
    fn new(scenario: &Scenario, tasks: &'a TaskSet, options: RunOptions) -> Self {
        let p = scenario.params;
        let gpu = scenario.gpu;
        let nc = gpu.n_contexts as usize;
        let indices: Vec<usize> = (0..tasks.len()).collect();
        let afets = par::map(options.exec, &indices, |&i| {
            measure_afet(
                &tasks.tasks()[i],
                tasks,
                &gpu,
                &WaterFilling,
                p.afet_repetitions,
                derive_seed(p.seed, i as u64),
            )
        });
        let states: Vec<TaskState> = tasks
            .iter()
            .zip(&afets)
            .map(|(t, &afet)| TaskState {
                task: t.id,
                current_context: 0,
                timing: TaskTiming::new(afet, &t.effective_stage_times(), p.window_size),
            })
            .collect();
        let loads: Vec<(Priority, f64)> = tasks
            .iter()
            .zip(&states)
            .map(|(t, s)| (t.priority, s.timing.utilization(t.period)))
            .collect();
        let assignment = populate_contexts(&loads, nc, scenario.scheduler.populate_order);
        let mut states = states;
        for (s, &k) in states.iter_mut().zip(&assignment.context_of) {
            s.current_context = k;
        }
        let task_loads = tasks
            .iter()
            .zip(&loads)
            .zip(&assignment.context_of)
            .map(|((t, &(_, u)), &home)| TaskLoad {
                priority: t.priority,
                utilization: u,
                home,
                active_mask: 0,
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let phases = tasks
            .iter()
            .map(|t| match p.phase_mode {
                PhaseMode::Random => rng.gen::<f64>() * t.period,
                PhaseMode::Zero => 0.0,
            })
            .collect();

        Simulation {
            gpu,
            config: scenario.scheduler,
            tasks,
            duration: p.duration,
            options,
            rate_model: WaterFilling,
            states,
            initial_contexts: assignment.context_of,
            afets,
            phases,
            release_count: vec![0; tasks.len()],
            next_job: 0,
            jobs: Vec::new(),
            inflight: vec![vec![0; nc]; tasks.len()],
            loads: task_loads,
            context_jobs: vec![BTreeSet::new(); nc],
            queues: vec![ReadyQueue::default(); nc],
            streams: vec![vec![None; gpu.n_streams as usize]; nc],
            active: Vec::new(),
            active_stream: Vec::new(),
            allocation: RateAllocation::default(),
            now: 0.0,
            metrics: MetricsAccumulator::new(p.duration * p.warmup_fraction, p.duration),
            log: Vec::new(),
            pending_starts: Vec::new(),
            violations: Vec::new(),
            dispatches: Vec::new(),
        }
    }

    fn next_release(&self) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, t) in self.tasks.iter().enumerate() {
            let at = self.phases[i] + self.release_count[i] as f64 * t.period;
            if at < best.1 {
                best = (i, at);
            }
        }
        best
    }

    fn run(&mut self) -> Result<(), EngineError> {
        loop {
            let (task, t_release) = self.next_release();
            let completion = if self.active.is_empty() {
                None
            } else {
                Some(next_completion(&self.active, &self.allocation, self.now)?)
            };
            let release_first = completion.is_none_or(|(_, t)| t_release <= t);
            let t = if release_first {
                t_release
            } else {
                completion.expect("completion exists").1
            };
            if t > self.duration {
                break;
            }
            if t > self.now {
                advance_progress(&mut self.active, &self.allocation, t - self.now)?;
                self.now = t;
            }
            if release_first {
                self.release(task)?;
            } else {
                self.complete(completion.expect("completion exists").0)?;
            }
            self.dispatch_all()?;
            self.rate_model.allocate_into(&self.gpu, &self.active, &mut self.allocation);
            self.patch_start_rates();
            if self.options.audit {
                self.audit();
            }
        }
        Ok(())
    }

    fn emit(&mut self, record: LogRecord) {
        if self.options.event_log {
            self.log.push(record);
        }
    }

    fn job(&self, id: JobId) -> &Job {
        self.jobs[id.0 as usize].as_ref().expect("live job")
    }

    fn release(&mut self, i: usize) -> Result<(), EngineError> {
        let spec = &self.tasks.tasks()[i];
        self.release_count[i] += 1;
        let now = self.now;
        let job_id = JobId(self.next_job);
        self.next_job += 1;
        let mut job = make_job(spec, &self.states[i].timing, now, job_id)?;
        if self.options.audit {
            let last = job.stage_jobs.last().expect("at least one stage").virtual_abs_deadline;
            if (last - job.release_time - spec.deadline).abs() > 1e-9 || last != job.absolute_deadline {
                self.violations
                    .push(format!("t={now}: job {job_id} virtual deadlines do not sum to D"));
            }
        }
        let mut rec = LogRecord::new(now, EventKind::Release);
        rec.task = Some(spec.id.0);
        rec.job = Some(job_id.0);
        rec.priority = Some(spec.priority);
        rec.deadline = Some(job.absolute_deadline);
        self.emit(rec);
        self.metrics.on_release(spec.priority, now);

        let utilization = self.loads[i].utilization;
        let ledgers = context_utilizations(self.gpu.n_contexts as usize, &self.loads);
        let home = self.states[i].current_context;
        let mret = self.states[i].timing.mret_task();
        let n_streams = self.gpu.n_streams;
        let placement = admit_or_migrate(
            spec.priority,
            utilization,
            home,
            &ledgers,
            n_streams,
            self.config.mode,
            |k| predicted_finish_time(now, self.context_backlog(k), n_streams, mret),
        );

        let mut rec = LogRecord::new(now, EventKind::Admit);
        rec.task = Some(spec.id.0);
        rec.job = Some(job_id.0);
        rec.priority = Some(spec.priority);
        let context = match &placement {
            Placement::Fixed { context } => {
                rec.context = Some(*context);
                *context
            }
            Placement::Home { check } => {
                rec.context = Some(check.context);
                rec.lhs = Some(check.lhs);
                rec.rhs = Some(check.rhs);
                check.context
            }
            Placement::Migrated { from, check, .. } => {
                rec.context = Some(check.context);
                rec.from_context = Some(*from);
                rec.lhs = Some(check.lhs);
                rec.rhs = Some(check.rhs);
                check.context
            }
            Placement::Rejected { home } => {
                rec.kind = EventKind::Reject;
                rec.context = Some(home.context);
                rec.lhs = Some(home.lhs);
                rec.rhs = Some(home.rhs);
                self.emit(rec);
                self.metrics.on_reject(spec.priority, now);
                return Ok(());
            }
        };
        self.emit(rec);
        let migrated = matches!(placement, Placement::Migrated { .. });
        self.metrics.on_admit(spec.priority, now, migrated);
        if migrated {
            self.states[i].current_context = context;
            self.loads[i].home = context;
        }

        job.context = Some(context);
        job.stage_jobs[0].transition(StageState::Ready)?;
        self.queues[context].push(ReadyEntry::new(&job, 0, &self.config));
        self.inflight[i][context] += 1;
        self.loads[i].active_mask |= 1 << context;
        self.context_jobs[context].insert(job_id);
        let slot = job_id.0 as usize;
        if self.jobs.len() <= slot {
            self.jobs.resize(slot + 1, None);
        }
        self.jobs[slot] = Some(job);
        Ok(())
    }

    /// Remaining predicted work of the admitted, unfinished jobs in `ctx`.
    fn context_backlog(&self, ctx: usize) -> f64 {
        self.context_jobs[ctx]
            .iter()
            .map(|&id| {
                let job = self.job(id);
                let timing = &self.states[job.task_id.index()].timing;
                remaining_mret(job, timing, |stage| {
                    self.active
                        .iter()
                        .find(|a| a.id == StageRef { job: id, stage })
                        .map(|a| a.remaining_work)
                })
            })
            .sum()
    }

    fn complete(&mut self, idx: usize) -> Result<(), EngineError> {
        let now = self.now;
        let stage = self.active.swap_remove(idx);
        let stream = self.active_stream.swap_remove(idx);
        let ctx = stage.context;
        self.streams[ctx][stream as usize] = None;
        let slot = stage.id.job.0 as usize;
        let job = self.jobs[slot].as_mut().expect("running job is live");
        let i = job.task_id.index();
        let outcome = on_stage_complete(job, stage.id.stage, now, &mut self.states[i].timing)?;
        self.loads[i].utilization = self.states[i].timing.utilization(self.tasks.tasks()[i].period);
        let (task_id, priority, release, deadline, batch) =
            (job.task_id, job.priority, job.release_time, job.absolute_deadline, job.batch_size);

        let mut rec = LogRecord::new(now, EventKind::Complete);
        rec.task = Some(task_id.0);
        rec.job = Some(stage.id.job.0);
        rec.stage = Some(stage.id.stage);
        rec.context = Some(ctx);
        rec.stream = Some(stream);
        self.emit(rec);

        match outcome {
            StageOutcome::NextReady { stage: next, .. } => {
                let entry = ReadyEntry::new(self.job(stage.id.job), next, &self.config);
                self.queues[ctx].push(entry);
            }
            StageOutcome::JobFinished { response, .. } => {
                let mut rec = LogRecord::new(now, EventKind::Finish);
                rec.task = Some(task_id.0);
                rec.job = Some(stage.id.job.0);
                rec.context = Some(ctx);
                rec.priority = Some(priority);
                rec.deadline = Some(deadline);
                rec.batch = Some(batch);
                self.emit(rec);
                self.metrics.on_finish(priority, release, deadline, now, batch);
                if self.options.audit {
                    let floor = self.tasks.tasks()[i].effective_stage_times().iter().sum::<f64>();
                    if response < floor - 1e-9 {
                        self.violations.push(format!(
                            "t={now}: job {} responded in {response} < nominal {floor}",
                            stage.id.job
                        ));
                    }
                }
                self.inflight[i][ctx] -= 1;
                if self.inflight[i][ctx] == 0 {
                    self.loads[i].active_mask &= !(1 << ctx);
                }
                self.context_jobs[ctx].remove(&stage.id.job);
                self.jobs[slot] = None;
            }
        }
        Ok(())
    }

    fn dispatch_all(&mut self) -> Result<(), EngineError> {
        let now = self.now;
        for ctx in 0..self.queues.len() {
            for stream in 0..self.streams[ctx].len() {
                if self.streams[ctx][stream].is_some() {
                    continue;
                }
                let snapshot = if self.options.dispatch_trace && !self.queues[ctx].is_empty() {
                    Some(self.queues[ctx].iter().copied().collect::<Vec<_>>())
                } else {
                    None
                };
                let Some(entry) = self.queues[ctx].dispatch() else {
                    break;
                };
                if let Some(ready) = snapshot {
                    self.dispatches.push(DispatchRecord {
                        time: now,
                        context: ctx,
                        ready,
                        chosen: entry,
                    });
                }
                let id = entry.stage;
                let job = self.jobs[id.job.0 as usize].as_mut().expect("queued job is live");
                let sj = &mut job.stage_jobs[id.stage];
                sj.transition(StageState::Running)?;
                sj.started_at = Some(now);
                let spec = &self.tasks.tasks()[job.task_id.index()];
                self.active.push(ActiveStage {
                    id,
                    context: ctx,
                    width: spec.stages[id.stage].width as f64,
                    remaining_work: sj.remaining_work,
                });
                self.active_stream.push(stream as u32);
                self.streams[ctx][stream] = Some(id);

                let mut rec = LogRecord::new(now, EventKind::Start);
                rec.task = Some(job.task_id.0);
                rec.job = Some(id.job.0);
                rec.stage = Some(id.stage);
                rec.context = Some(ctx);
                rec.stream = Some(stream as u32);
                rec.priority = Some(job.priority);
                rec.deadline = Some(sj.virtual_abs_deadline);
                if self.options.event_log {
                    self.pending_starts.push((self.log.len(), id));
                }
                self.emit(rec);
            }
        }
        Ok(())
    }

    fn patch_start_rates(&mut self) {
        for (pos, id) in self.pending_starts.drain(..) {
            if let Some(i) = self.active.iter().position(|a| a.id == id) {
                self.log[pos].rate = Some(self.allocation.rate[i]);
            }
        }
    }

    fn audit(&mut self) {
        let now = self.now;
        for (i, t) in self.tasks.iter().enumerate() {
            let fresh = self.states[i].timing.utilization(t.period);
            let mask = self.inflight[i]
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .fold(0u64, |m, (k, _)| m | 1 << k);
            let l = &self.loads[i];
            if l.utilization != fresh || l.active_mask != mask || l.home != self.states[i].current_context {
                self.violations.push(format!("t={now}: cached load of task {i} is stale"));
            }
        }
        let ledgers = context_utilizations(self.gpu.n_contexts as usize, &self.loads);
        for (k, l) in ledgers.iter().enumerate() {
            if l.total != l.hp_total + l.lp_total || l.active != l.hp_total + l.lp_active {
                self.violations.push(format!("t={now}: ledger identity broken in context {k}"));
            }
        }
        let total = self.allocation.total_allocated();
        if total > self.gpu.total_sms as f64 + 1e-9 {
            self.violations
                .push(format!("t={now}: {total} SMs allocated of {}", self.gpu.total_sms));
        }
        for (k, q) in self.queues.iter().enumerate() {
            if !q.is_empty() && self.streams[k].iter().any(Option::is_none) {
                self.violations
                    .push(format!("t={now}: context {k} idles a stream with {} ready", q.len()));
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.priority.is_high() && self.states[i].current_context != self.initial_contexts[i] {
                self.violations.push(format!("t={now}: HP task {} changed context", t.id));
            }
        }
    }

    fn finish(mut self, header: MetricsReport) -> RunOutput {
        let live: Vec<(Priority, f64, f64)> = self
            .jobs
            .iter()
            .flatten()
            .map(|j| (j.priority, j.release_time, j.absolute_deadline))
            .collect();
        for (priority, release, deadline) in live {
            self.metrics.on_unfinished(priority, release, deadline);
        }
        let warmup = self.metrics.warmup();
        let mut end = LogRecord::new(self.duration, EventKind::End);
        end.warmup = Some(warmup);
        end.duration = Some(self.duration);
        self.emit(end);
        RunOutput {
            report: self.metrics.finish(header),
            log: self.log,
            violations: self.violations,
            dispatches: self.dispatches,
            initial_contexts: self.initial_contexts,
            afets: self.afets,
        }
    }
}
