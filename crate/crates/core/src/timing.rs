//! Execution-time prediction.
//!
//! Each stage keeps the last `ws` observed execution times; its prediction is
//! the window maximum (MRET). Until a task has completed a job its prediction
//! is the AFET measured offline under full colocation, split over stages by
//! nominal share.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gpu::{advance_progress, next_completion, ActiveStage, GpuConfig, RateAllocation, RateModel, StageRef};
use crate::model::{JobId, TaskSet, TaskSpec};

pub const DEFAULT_WINDOW_SIZE: usize = 5;
pub const DEFAULT_AFET_REPETITIONS: usize = 10;
/// Back-to-back target jobs observed per AFET repetition.
pub const AFET_JOBS_PER_REPETITION: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("execution sample {0} must be > 0")]
    NonpositiveSample(f64),
    #[error("stage MRETs sum to zero")]
    ZeroTotalMret,
    #[error("window size must be >= 1")]
    ZeroWindow,
}

/// Ring of the most recent execution times of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionWindow {
    capacity: usize,
    samples: VecDeque<(u64, f64)>,
    recorded: u64,
}

impl ExecutionWindow {
    pub fn new(capacity: usize) -> Result<Self, TimingError> {
        if capacity == 0 {
            return Err(TimingError::ZeroWindow);
        }
        Ok(ExecutionWindow {
            capacity,
            samples: VecDeque::with_capacity(capacity),
            recorded: 0,
        })
    }

    pub fn record(&mut self, observed: f64) -> Result<(), TimingError> {
        if observed.is_nan() || observed <= 0.0 {
            return Err(TimingError::NonpositiveSample(observed));
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((self.recorded, observed));
        self.recorded += 1;
        Ok(())
    }

    pub fn max(&self) -> Option<f64> {
        self.samples.iter().map(|&(_, v)| v).reduce(f64::max)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|&(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Timing history of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTiming {
    afet: f64,
    shares: Vec<f64>,
    windows: Vec<ExecutionWindow>,
    completed_jobs: u64,
}

impl TaskTiming {
    /// `stage_nominal` only fixes how AFET is split while windows are empty.
    pub fn new(afet: f64, stage_nominal: &[f64], window_size: usize) -> Self {
        let total: f64 = stage_nominal.iter().sum();
        let shares = stage_nominal.iter().map(|t| t / total).collect();
        let window = ExecutionWindow::new(window_size.max(1)).expect("non-zero window");
        TaskTiming {
            afet,
            shares,
            windows: vec![window; stage_nominal.len()],
            completed_jobs: 0,
        }
    }

    pub fn afet(&self) -> f64 {
        self.afet
    }

    pub fn stage_count(&self) -> usize {
        self.windows.len()
    }

    pub fn window(&self, stage: usize) -> &ExecutionWindow {
        &self.windows[stage]
    }

    pub fn completed_jobs(&self) -> u64 {
        self.completed_jobs
    }

    pub fn record_execution(&mut self, stage: usize, observed: f64) -> Result<(), TimingError> {
        self.windows[stage].record(observed)
    }

    pub fn note_job_completed(&mut self) {
        self.completed_jobs += 1;
    }

    /// `mret_{i,j}(t)`.
    pub fn mret_stage(&self, stage: usize) -> f64 {
        self.windows[stage]
            .max()
            .unwrap_or(self.afet * self.shares[stage])
    }

    /// `mret_i(t)`.
    pub fn mret_task(&self) -> f64 {
        (0..self.windows.len()).map(|j| self.mret_stage(j)).sum()
    }

    /// `u_i(t)`: AFET-based until the first job completes, MRET-based after.
    pub fn utilization(&self, period: f64) -> f64 {
        if self.completed_jobs == 0 {
            self.afet / period
        } else {
            self.mret_task() / period
        }
    }
}

/// Snapshot of every task's stage and task MRETs.
#[derive(Debug, Clone, PartialEq)]
pub struct MretTable {
    pub stage: Vec<Vec<f64>>,
    pub task: Vec<f64>,
}

impl MretTable {
    pub fn snapshot<'a>(timings: impl IntoIterator<Item = &'a TaskTiming>) -> Self {
        let stage: Vec<Vec<f64>> = timings
            .into_iter()
            .map(|t| (0..t.stage_count()).map(|j| t.mret_stage(j)).collect())
            .collect();
        let task = stage.iter().map(|s| s.iter().sum()).collect();
        MretTable { stage, task }
    }
}

/// Relative virtual deadlines proportional to stage MRETs. The last stage
/// absorbs the rounding residue so the spans sum to `deadline`.
pub fn virtual_deadlines(stage_mrets: &[f64], deadline: f64) -> Result<Vec<f64>, TimingError> {
    let total: f64 = stage_mrets.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(TimingError::ZeroTotalMret);
    }
    let n = stage_mrets.len();
    let mut spans: Vec<f64> = stage_mrets.iter().map(|m| m / total * deadline).collect();
    let head: f64 = spans[..n - 1].iter().sum();
    spans[n - 1] = deadline - head;
    Ok(spans)
}

struct Occupant {
    works: Vec<f64>,
    stage: usize,
    started: f64,
}

/// Average full-load execution time of `target`.
///
/// Each repetition fills every stream of every context: the target runs
/// back-to-back in stream 0 of context 0 and all other streams run uniformly
/// random pool tasks (with replacement), replaced as soon as they finish.
pub fn measure_afet(
    target: &TaskSpec,
    pool: &TaskSet,
    gpu: &GpuConfig,
    rate_model: &dyn RateModel,
    repetitions: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<usize> = (0..gpu.n_contexts as usize)
        .flat_map(|k| std::iter::repeat_n(k, gpu.n_streams as usize))
        .collect();
    let target_works = target.effective_stage_times();
    let target_width = target.stages.iter().map(|s| s.width as f64).collect::<Vec<_>>();
    let pool_tasks = pool.tasks();

    let draw = |rng: &mut ChaCha8Rng| -> Option<usize> {
        (!pool_tasks.is_empty()).then(|| rng.gen_range(0..pool_tasks.len()))
    };

    let mut total = 0.0;
    let mut samples = 0usize;
    for _ in 0..repetitions.max(1) {
        // occupant per slot: (task index or None for target, works, widths)
        let mut occupants: Vec<Option<(Option<usize>, Occupant)>> = slots
            .iter()
            .enumerate()
            .map(|(slot, _)| {
                if slot == 0 {
                    Some((
                        None,
                        Occupant {
                            works: target_works.clone(),
                            stage: 0,
                            started: 0.0,
                        },
                    ))
                } else {
                    draw(&mut rng).map(|p| {
                        (
                            Some(p),
                            Occupant {
                                works: pool_tasks[p].effective_stage_times(),
                                stage: 0,
                                started: 0.0,
                            },
                        )
                    })
                }
            })
            .collect();

        let mut active: Vec<ActiveStage> = Vec::new();
        let mut owners: Vec<usize> = Vec::new();
        for (slot, occ) in occupants.iter().enumerate() {
            if let Some((who, o)) = occ {
                active.push(ActiveStage {
                    id: StageRef {
                        job: JobId(slot as u64),
                        stage: 0,
                    },
                    context: slots[slot],
                    width: width_of(*who, 0, &target_width, pool_tasks),
                    remaining_work: o.works[0],
                });
                owners.push(slot);
            }
        }

        let mut now = 0.0;
        let mut done = 0;
        let mut alloc = RateAllocation::default();
        while done < AFET_JOBS_PER_REPETITION {
            rate_model.allocate_into(gpu, &active, &mut alloc);
            let (idx, t) = next_completion(&active, &alloc, now).expect("target always active");
            advance_progress(&mut active, &alloc, t - now).expect("no overshoot before next completion");
            now = t;
            let slot = owners[idx];
            let (who, occ) = occupants[slot].as_mut().expect("occupied slot");
            occ.stage += 1;
            if occ.stage < occ.works.len() {
                active[idx].remaining_work = occ.works[occ.stage];
                active[idx].width = width_of(*who, occ.stage, &target_width, pool_tasks);
                active[idx].id.stage = occ.stage;
                continue;
            }
            if who.is_none() {
                total += now - occ.started;
                samples += 1;
                done += 1;
                occ.stage = 0;
                occ.started = now;
            } else {
                let p = draw(&mut rng).expect("pool nonempty when competitor ran");
                *who = Some(p);
                *occ = Occupant {
                    works: pool_tasks[p].effective_stage_times(),
                    stage: 0,
                    started: now,
                };
            }
            active[idx].remaining_work = occ.works[0];
            active[idx].width = width_of(*who, 0, &target_width, pool_tasks);
            active[idx].id.stage = 0;
        }
    }
    total / samples as f64
}

fn width_of(who: Option<usize>, stage: usize, target_width: &[f64], pool: &[TaskSpec]) -> f64 {
    match who {
        None => target_width[stage],
        Some(p) => pool[p].stages[stage].width as f64,
    }
}
