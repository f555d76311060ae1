//! Discrete-event simulator for priority-based real-time DNN inference on a
//! partitioned GPU.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] - tasks, stages, jobs and task-set construction.
//! * [`timing`] - sliding-window MRET, AFET measurement, utilization and
//!   virtual deadlines.
//! * [`gpu`] - SM partitioning and the two-level water-filling rate model.
//! * [`scheduler`] - context population, admission/migration and the
//!   eight-level stage dispatcher.
//! * [`engine`] - the deterministic event loop and metrics.
//! * [`scenario`], [`sweep`], [`report`] - scenario files, configuration
//!   sweeps and CSV/JSON output.
//!
//! Independent runs (sweep cells, AFET repetitions per task) are spread over
//! a rayon pool when the `parallel` feature is enabled; see [`par`].

pub mod engine;
pub mod error;
pub mod gpu;
pub mod log;
pub mod metrics;
pub mod model;
pub mod par;
pub mod presets;
pub mod report;
pub mod scenario;
pub mod scheduler;
pub mod sweep;
pub mod timing;

pub use engine::{run, run_with, scale_to_overload, RunOptions, RunOutput, Scenario, SimParams};
pub use error::Error;
pub use gpu::{GpuConfig, Policy};
pub use metrics::MetricsReport;
pub use model::{build_task_set, Priority, StageProfile, TaskId, TaskSet, TaskSpec};
pub use scenario::{load_scenario, ScenarioConfig};
pub use sweep::{run_sweep, SweepSpec};
