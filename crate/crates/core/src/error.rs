use thiserror::Error;

use crate::engine::EngineError;
use crate::gpu::GpuError;
use crate::model::ModelError;
use crate::report::ReportError;
use crate::scenario::ScenarioError;
use crate::timing::TimingError;

/// Umbrella error for callers that drive the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Gpu(#[from] GpuError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Report(#[from] ReportError),
}
