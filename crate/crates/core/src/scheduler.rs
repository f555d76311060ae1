//! Scheduling policy: offline context population, online admission and
//! migration, and the stage dispatcher.
//!
//! Ready stages are ordered by eight fixed levels built from three bits
//! (task priority, last stage, predecessor missed its virtual deadline),
//! then EDF inside a level. Stages run to completion once dispatched.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::gpu::StageRef;
use crate::model::{Job, ModelError, Priority, StageState, TaskId};
use crate::timing::TaskTiming;

/// Per-context utilization ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ContextUtilization {
    /// `U^{h,t}_k`
    pub hp_total: f64,
    /// `U^{l,t}_k`
    pub lp_total: f64,
    /// `U^{l,a}_k`
    pub lp_active: f64,
    /// `U^t_k = U^{h,t}_k + U^{l,t}_k`
    pub total: f64,
    /// `U^a_k = U^{h,t}_k + U^{l,a}_k`
    pub active: f64,
    /// Utilization of HP tasks with an in-flight job here (HPA test only).
    pub hp_active: f64,
}

impl ContextUtilization {
    pub fn new(hp_total: f64, lp_total: f64, lp_active: f64, hp_active: f64) -> Self {
        ContextUtilization {
            hp_total,
            lp_total,
            lp_active,
            total: hp_total + lp_total,
            active: hp_total + lp_active,
            hp_active,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_staging: bool,
    pub no_last: bool,
    pub no_prior: bool,
    pub no_fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoStaging,
    NoLast,
    NoPrior,
    NoFixed,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no-staging" => Ok(Ablation::NoStaging),
            "no-last" => Ok(Ablation::NoLast),
            "no-prior" => Ok(Ablation::NoPrior),
            "no-fixed" => Ok(Ablation::NoFixed),
            other => Err(format!("unknown ablation {other:?}")),
        }
    }
}

impl AblationFlags {
    pub fn from_list(list: &[Ablation]) -> Self {
        let mut f = AblationFlags::default();
        for a in list {
            match a {
                Ablation::NoStaging => f.no_staging = true,
                Ablation::NoLast => f.no_last = true,
                Ablation::NoPrior => f.no_prior = true,
                Ablation::NoFixed => f.no_fixed = true,
            }
        }
        f
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerMode {
    pub hpa_enabled: bool,
}

/// Task order inside each priority class before the greedy context pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulateOrder {
    #[default]
    UtilizationDesc,
    Insertion,
}

/// Deadline used for EDF inside a fixed level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdfKey {
    #[default]
    Stage,
    Job,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub ablations: AblationFlags,
    pub mode: SchedulerMode,
    pub populate_order: PopulateOrder,
    pub edf_key: EdfKey,
}

/// Result of the offline population pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAssignment {
    pub context_of: Vec<usize>,
    pub totals: Vec<f64>,
}

/// Greedy offline assignment: HP tasks first, then LP tasks, each to the
/// context with the smallest total utilization so far (lowest index on ties).
pub fn populate_contexts(
    tasks: &[(Priority, f64)],
    n_contexts: usize,
    order: PopulateOrder,
) -> ContextAssignment {
    let mut context_of = vec![0; tasks.len()];
    let mut totals = vec![0.0; n_contexts.max(1)];
    for class in [Priority::High, Priority::Low] {
        let mut members: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].0 == class).collect();
        if order == PopulateOrder::UtilizationDesc {
            members.sort_by(|&a, &b| tasks[b].1.total_cmp(&tasks[a].1).then(a.cmp(&b)));
        }
        for i in members {
            let k = min_index(&totals);
            context_of[i] = k;
            totals[k] += tasks[i].1;
        }
    }
    ContextAssignment { context_of, totals }
}

fn min_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Per-task input for the ledgers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskLoad {
    pub priority: Priority,
    pub utilization: f64,
    pub home: usize,
    /// Bit `k` set when the task has at least one in-flight job in context `k`.
    pub active_mask: u64,
}

pub fn context_utilizations(n_contexts: usize, loads: &[TaskLoad]) -> Vec<ContextUtilization> {
    let mut hp_total = vec![0.0; n_contexts];
    let mut lp_total = vec![0.0; n_contexts];
    let mut lp_active = vec![0.0; n_contexts];
    let mut hp_active = vec![0.0; n_contexts];
    for load in loads {
        let (total, active) = match load.priority {
            Priority::High => (&mut hp_total, &mut hp_active),
            Priority::Low => (&mut lp_total, &mut lp_active),
        };
        total[load.home] += load.utilization;
        let mut mask = load.active_mask;
        while mask != 0 {
            let k = mask.trailing_zeros() as usize;
            active[k] += load.utilization;
            mask &= mask - 1;
        }
    }
    (0..n_contexts)
        .map(|k| ContextUtilization::new(hp_total[k], lp_total[k], lp_active[k], hp_active[k]))
        .collect()
}

/// One evaluation of the utilization test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissionCheck {
    pub context: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub passed: bool,
}

/// LP: `U^{l,a}_k + u_j < N_s - U^{h,t}_k`.
/// HP (HPA mode): `U^{h,a}_k + u_j < N_s`.
pub fn admission_test(
    ledger: &ContextUtilization,
    context: usize,
    n_streams: u32,
    priority: Priority,
    utilization: f64,
) -> AdmissionCheck {
    let (lhs, rhs) = match priority {
        Priority::Low => (ledger.lp_active + utilization, n_streams as f64 - ledger.hp_total),
        Priority::High => (ledger.hp_active + utilization, n_streams as f64),
    };
    AdmissionCheck {
        context,
        lhs,
        rhs,
        passed: lhs < rhs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Placement {
    /// Placed without a test (HP outside HPA mode).
    Fixed { context: usize },
    /// Passed the test in the home context.
    Home { check: AdmissionCheck },
    /// Home failed; moved to the passing context with earliest predicted finish.
    Migrated {
        from: usize,
        check: AdmissionCheck,
        predicted_finish: f64,
    },
    Rejected { home: AdmissionCheck },
}

impl Placement {
    pub fn context(&self) -> Option<usize> {
        match self {
            Placement::Fixed { context } => Some(*context),
            Placement::Home { check } | Placement::Migrated { check, .. } => Some(check.context),
            Placement::Rejected { .. } => None,
        }
    }
}

/// Admission with migration.
///
/// `predicted_finish(k)` is evaluated only for contexts other than `home`
/// that pass the test.
pub fn admit_or_migrate(
    priority: Priority,
    utilization: f64,
    home: usize,
    ledgers: &[ContextUtilization],
    n_streams: u32,
    mode: SchedulerMode,
    mut predicted_finish: impl FnMut(usize) -> f64,
) -> Placement {
    if priority.is_high() && !mode.hpa_enabled {
        return Placement::Fixed { context: home };
    }
    let home_check = admission_test(&ledgers[home], home, n_streams, priority, utilization);
    if home_check.passed {
        return Placement::Home { check: home_check };
    }
    if priority.is_high() {
        return Placement::Rejected { home: home_check };
    }
    let mut best: Option<(AdmissionCheck, f64)> = None;
    for (k, ledger) in ledgers.iter().enumerate() {
        if k == home {
            continue;
        }
        let check = admission_test(ledger, k, n_streams, priority, utilization);
        if !check.passed {
            continue;
        }
        let pft = predicted_finish(k);
        if best.is_none_or(|(_, b)| pft < b) {
            best = Some((check, pft));
        }
    }
    match best {
        Some((check, predicted_finish)) => Placement::Migrated {
            from: home,
            check,
            predicted_finish,
        },
        None => Placement::Rejected { home: home_check },
    }
}

/// `t + backlog / N_s + mret_i(t)`, where `backlog` is the remaining MRET of
/// unfinished admitted jobs in the context.
pub fn predicted_finish_time(now: f64, backlog: f64, n_streams: u32, mret: f64) -> f64 {
    now + backlog / n_streams as f64 + mret
}

/// Remaining predicted time of a job: stage MRETs prorated by remaining work.
pub fn remaining_mret(job: &Job, timing: &TaskTiming, running_remaining: impl Fn(usize) -> Option<f64>) -> f64 {
    job.stage_jobs
        .iter()
        .filter(|s| s.state != StageState::Done)
        .map(|s| {
            let left = running_remaining(s.stage_index).unwrap_or(s.remaining_work);
            timing.mret_stage(s.stage_index) * (left / s.initial_work)
        })
        .sum()
}

/// Attributes of a ready stage that decide its fixed level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAttrs {
    pub priority: Priority,
    pub is_last: bool,
    pub predecessor_missed: bool,
}

/// Fixed level in `0..8`, lower is more urgent.
pub fn priority_level(attrs: StageAttrs, flags: &AblationFlags) -> u8 {
    if flags.no_fixed {
        return 0;
    }
    let is_last = attrs.is_last && !flags.no_last;
    let missed = attrs.predecessor_missed && !flags.no_prior;
    (u8::from(!attrs.priority.is_high()) << 2) | (u8::from(!is_last) << 1) | u8::from(!missed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityKey {
    pub level: u8,
    pub edf_key: f64,
    pub task_id: TaskId,
    pub job_id: crate::model::JobId,
}

impl Eq for PriorityKey {}

impl Ord for PriorityKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.level
            .cmp(&other.level)
            .then_with(|| self.edf_key.total_cmp(&other.edf_key))
            .then_with(|| self.task_id.cmp(&other.task_id))
            .then_with(|| self.job_id.cmp(&other.job_id))
    }
}

impl PartialOrd for PriorityKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn priority_key(job: &Job, stage: usize, config: &SchedulerConfig) -> PriorityKey {
    let s = &job.stage_jobs[stage];
    let attrs = StageAttrs {
        priority: job.priority,
        is_last: job.is_last_stage(stage),
        predecessor_missed: s.predecessor_missed,
    };
    PriorityKey {
        level: priority_level(attrs, &config.ablations),
        edf_key: match config.edf_key {
            EdfKey::Stage => s.virtual_abs_deadline,
            EdfKey::Job => job.absolute_deadline,
        },
        task_id: job.task_id,
        job_id: job.job_id,
    }
}

/// A queued ready stage. The raw attributes ride along for auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct ReadyEntry {
    pub key: PriorityKey,
    pub stage: StageRef,
    #[serde(skip)]
    pub attrs: StageAttrsOrd,
}

/// `StageAttrs` plus the raw deadlines, ordered last so it never decides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageAttrsOrd {
    pub attrs: StageAttrs,
    pub virtual_abs_deadline: f64,
    pub absolute_deadline: f64,
}

impl Eq for StageAttrsOrd {}

impl PartialOrd for StageAttrsOrd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for StageAttrsOrd {
    fn cmp(&self, _other: &Self) -> Ordering {
        Ordering::Equal
    }
}

impl ReadyEntry {
    pub fn new(job: &Job, stage: usize, config: &SchedulerConfig) -> Self {
        ReadyEntry {
            key: priority_key(job, stage, config),
            stage: StageRef {
                job: job.job_id,
                stage,
            },
            attrs: StageAttrsOrd {
                attrs: StageAttrs {
                    priority: job.priority,
                    is_last: job.is_last_stage(stage),
                    predecessor_missed: job.stage_jobs[stage].predecessor_missed,
                },
                virtual_abs_deadline: job.stage_jobs[stage].virtual_abs_deadline,
                absolute_deadline: job.absolute_deadline,
            },
        }
    }
}

/// Ready queue of one context.
#[derive(Debug, Clone, Default)]
pub struct ReadyQueue {
    entries: BTreeSet<ReadyEntry>,
}

impl ReadyQueue {
    pub fn push(&mut self, entry: ReadyEntry) {
        self.entries.insert(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReadyEntry> {
        self.entries.iter()
    }

    /// Removes and returns the most urgent ready stage.
    pub fn dispatch(&mut self) -> Option<ReadyEntry> {
        self.entries.pop_first()
    }
}

/// What finishing a stage leads to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageOutcome {
    NextReady { stage: usize, predecessor_missed: bool },
    JobFinished { missed: bool, response: f64 },
}

/// Bookkeeping when `stage` of `job` completes at `now`: records the observed
/// execution time and readies the successor.
pub fn on_stage_complete(
    job: &mut Job,
    stage: usize,
    now: f64,
    timing: &mut TaskTiming,
) -> Result<StageOutcome, ModelError> {
    let s = &mut job.stage_jobs[stage];
    let started = s.started_at.expect("running stage has a start time");
    s.remaining_work = 0.0;
    s.transition(StageState::Done)?;
    timing.record_execution(stage, now - started)?;
    let missed_virtual = now > s.virtual_abs_deadline;
    if stage + 1 < job.stage_jobs.len() {
        let next = &mut job.stage_jobs[stage + 1];
        next.predecessor_missed = missed_virtual;
        next.transition(StageState::Ready)?;
        Ok(StageOutcome::NextReady {
            stage: stage + 1,
            predecessor_missed: missed_virtual,
        })
    } else {
        timing.note_job_completed();
        Ok(StageOutcome::JobFinished {
            missed: now > job.absolute_deadline,
            response: now - job.release_time,
        })
    }
}
