//! Tasks, stages, jobs and task-set construction.
//!
//! A task is a periodic DNN split into sequential stages. Each release of a
//! task produces a [`Job`] whose stages carry absolute virtual deadlines; the
//! stages are the only points where the dispatcher may switch work.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gpu::{effective_stage_time, BatchingCurve, GpuError};
use crate::presets;
use crate::timing::{virtual_deadlines, TaskTiming, TimingError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("duplicate task id {0}")]
    DuplicateId(TaskId),
    #[error("task ids must be dense in [1, {count}], found {id}")]
    IdOutOfRange { id: TaskId, count: usize },
    #[error("task {task}: invalid stage {stage}: {reason}")]
    InvalidStage {
        task: TaskId,
        stage: usize,
        reason: String,
    },
    #[error("task {task}: invalid period {period}")]
    InvalidPeriod { task: TaskId, period: f64 },
    #[error("task {0} has no stages")]
    NoStages(TaskId),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid stage transition {from:?} -> {to:?}")]
    InvalidTransition { from: StageState, to: StageState },
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Gpu(#[from] GpuError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Priority {
    #[serde(rename = "hp")]
    High,
    #[serde(rename = "lp")]
    Low,
}

impl Priority {
    pub fn is_high(self) -> bool {
        self == Priority::High
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Priority::High => "HP",
            Priority::Low => "LP",
        })
    }
}

/// 1-based task identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl TaskId {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        TaskId(index as u32 + 1)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Nominal cost of one stage: the time it takes when granted `width` SMs,
/// and the number of SMs it can exploit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageProfile {
    pub nominal_time: f64,
    pub width: u32,
}

/// Batch size of a task's jobs and the gain curve used to cost them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchProfile {
    pub size: u32,
    pub curve: BatchingCurve,
}

impl Default for BatchProfile {
    fn default() -> Self {
        BatchProfile {
            size: 1,
            curve: BatchingCurve::NONE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub period: f64,
    pub deadline: f64,
    pub priority: Priority,
    pub stages: Vec<StageProfile>,
    pub batch: BatchProfile,
    /// Free-form workload label, usually the DNN preset name.
    pub label: String,
}

impl TaskSpec {
    /// Builds a task with `deadline == period`.
    pub fn new(
        id: TaskId,
        period: f64,
        priority: Priority,
        stages: Vec<StageProfile>,
    ) -> Result<Self, ModelError> {
        let spec = TaskSpec {
            id,
            period,
            deadline: period,
            priority,
            stages,
            batch: BatchProfile::default(),
            label: String::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_batch(mut self, batch: BatchProfile) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(ModelError::InvalidPeriod {
                task: self.id,
                period: self.period,
            });
        }
        if self.stages.is_empty() {
            return Err(ModelError::NoStages(self.id));
        }
        for (j, stage) in self.stages.iter().enumerate() {
            if !(stage.nominal_time.is_finite() && stage.nominal_time > 0.0) {
                return Err(ModelError::InvalidStage {
                    task: self.id,
                    stage: j,
                    reason: format!("nominal_time {} must be > 0", stage.nominal_time),
                });
            }
            if stage.width == 0 {
                return Err(ModelError::InvalidStage {
                    task: self.id,
                    stage: j,
                    reason: "width must be >= 1".into(),
                });
            }
        }
        Ok(())
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn nominal_total(&self) -> f64 {
        self.stages.iter().map(|s| s.nominal_time).sum()
    }

    /// Service time of every stage at full width, batching included.
    pub fn effective_stage_times(&self) -> Vec<f64> {
        self.stages
            .iter()
            .map(|s| {
                effective_stage_time(s, self.batch.size, &self.batch.curve)
                    .expect("batch size validated at construction")
            })
            .collect()
    }

    /// The single-stage view used when staging is disabled.
    pub fn collapsed(&self) -> TaskSpec {
        let nominal_time = self.nominal_total();
        let width = self.stages.iter().map(|s| s.width).max().unwrap_or(1);
        TaskSpec {
            stages: vec![StageProfile {
                nominal_time,
                width,
            }],
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    tasks: Vec<TaskSpec>,
    n_high: usize,
    n_low: usize,
}

impl TaskSet {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn get(&self, id: TaskId) -> &TaskSpec {
        &self.tasks[id.index()]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// `(N_h, N_l)`.
    pub fn counts(&self) -> (usize, usize) {
        (self.n_high, self.n_low)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TaskSpec> {
        self.tasks.iter()
    }

    /// Applies `f` to every task, keeping ids and counts.
    pub fn map_tasks(&self, f: impl FnMut(&TaskSpec) -> TaskSpec) -> TaskSet {
        TaskSet {
            tasks: self.tasks.iter().map(f).collect(),
            n_high: self.n_high,
            n_low: self.n_low,
        }
    }
}

/// Validates a list of task specs and orders them by id.
pub fn build_task_set(specs: Vec<TaskSpec>) -> Result<TaskSet, ModelError> {
    if specs.is_empty() {
        return Err(ModelError::EmptyTaskSet);
    }
    let count = specs.len();
    let mut slots: Vec<Option<TaskSpec>> = vec![None; count];
    for spec in specs {
        spec.validate()?;
        let id = spec.id;
        if id.0 == 0 || id.0 as usize > count {
            return Err(ModelError::IdOutOfRange { id, count });
        }
        let slot = &mut slots[id.index()];
        if slot.is_some() {
            return Err(ModelError::DuplicateId(id));
        }
        *slot = Some(spec);
    }
    let tasks: Vec<TaskSpec> = slots.into_iter().map(|s| s.expect("dense ids")).collect();
    let n_high = tasks.iter().filter(|t| t.priority.is_high()).count();
    Ok(TaskSet {
        n_low: tasks.len() - n_high,
        n_high,
        tasks,
    })
}

/// Per-task scheduler state: home context and timing history.
#[derive(Debug, Clone)]
pub struct TaskState {
    pub task: TaskId,
    pub current_context: usize,
    pub timing: TaskTiming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageState {
    Pending,
    Ready,
    Running,
    Done,
}

impl StageState {
    pub fn can_become(self, next: StageState) -> bool {
        matches!(
            (self, next),
            (StageState::Pending, StageState::Ready)
                | (StageState::Ready, StageState::Running)
                | (StageState::Running, StageState::Done)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageJob {
    pub stage_index: usize,
    pub initial_work: f64,
    pub remaining_work: f64,
    pub virtual_abs_deadline: f64,
    pub predecessor_missed: bool,
    pub state: StageState,
    pub started_at: Option<f64>,
}

impl StageJob {
    pub fn transition(&mut self, next: StageState) -> Result<(), ModelError> {
        if !self.state.can_become(next) {
            return Err(ModelError::InvalidTransition {
                from: self.state,
                to: next,
            });
        }
        self.state = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub job_id: JobId,
    pub task_id: TaskId,
    pub priority: Priority,
    pub release_time: f64,
    pub absolute_deadline: f64,
    pub stage_jobs: Vec<StageJob>,
    pub batch_size: u32,
    /// Context the job was admitted to; `None` until placement.
    pub context: Option<usize>,
}

impl Job {
    pub fn is_last_stage(&self, stage: usize) -> bool {
        stage + 1 == self.stage_jobs.len()
    }
}

/// Instantiates one release of `task`.
///
/// Virtual deadlines are the task's current MRET shares of `D_i`, laid end to
/// end from the release instant, so the last one lands on the job deadline.
pub fn make_job(
    task: &TaskSpec,
    timing: &TaskTiming,
    release_time: f64,
    job_id: JobId,
) -> Result<Job, ModelError> {
    let stage_mrets: Vec<f64> = (0..task.stage_count())
        .map(|j| timing.mret_stage(j))
        .collect();
    let spans = virtual_deadlines(&stage_mrets, task.deadline)?;
    let absolute_deadline = release_time + task.deadline;
    let works = task.effective_stage_times();
    let n = spans.len();
    let mut acc = release_time;
    let stage_jobs = spans
        .iter()
        .zip(works)
        .enumerate()
        .map(|(j, (span, work))| {
            acc += span;
            StageJob {
                stage_index: j,
                initial_work: work,
                remaining_work: work,
                virtual_abs_deadline: if j + 1 == n { absolute_deadline } else { acc },
                predecessor_missed: false,
                state: StageState::Pending,
                started_at: None,
            }
        })
        .collect();
    Ok(Job {
        job_id,
        task_id: task.id,
        priority: task.priority,
        release_time,
        absolute_deadline,
        stage_jobs,
        batch_size: task.batch.size,
        context: None,
    })
}

/// Number of stages a DNN preset is split into (1 when staging is disabled).
pub fn stage_count_for_preset(dnn: &str, no_staging: bool) -> Result<usize, ModelError> {
    let profile =
        presets::dnn_profile(dnn).ok_or_else(|| ModelError::UnknownPreset(dnn.to_string()))?;
    Ok(if no_staging {
        1
    } else {
        profile.stage_fractions.len()
    })
}
