//! Scenario files: TOML (or JSON by extension), validated fail-closed.
//!
//! ```toml
//! seed = 1
//! duration = 60.0
//! overload = 1.5
//!
//! [gpu]
//! policy = "mps"
//! n_contexts = 6
//! n_streams = 1
//! oversubscription = "nc"
//!
//! [workload]
//! preset = "resnet18_main"
//!
//! [scheduler]
//! ablations = ["no-last"]
//! hpa = false
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{scale_to_overload, EngineError, PhaseMode, Scenario, SimParams};
use crate::gpu::{GpuConfig, GpuError, Policy};
use crate::model::{build_task_set, BatchProfile, ModelError, Priority, StageProfile, TaskId, TaskSpec};
use crate::presets::{dnn_profile, workload_preset, TaskGroup};
use crate::scheduler::{Ablation, AblationFlags, EdfKey, PopulateOrder, SchedulerConfig, SchedulerMode};
use crate::timing::{DEFAULT_AFET_REPETITIONS, DEFAULT_WINDOW_SIZE};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gpu(#[from] GpuError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Oversubscription as a number or the keyword `"nc"` (= number of contexts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Oversubscription {
    Value(f64),
    Keyword(OsKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OsKeyword {
    Nc,
}

impl Oversubscription {
    pub fn resolve(self, n_contexts: u32) -> f64 {
        match self {
            Oversubscription::Value(v) => v,
            Oversubscription::Keyword(OsKeyword::Nc) => n_contexts as f64,
        }
    }
}

impl std::str::FromStr for Oversubscription {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("nc") {
            return Ok(Oversubscription::Keyword(OsKeyword::Nc));
        }
        s.parse::<f64>()
            .map(Oversubscription::Value)
            .map_err(|_| format!("oversubscription {s:?} is neither a number nor \"nc\""))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuSection {
    #[serde(default = "default_total_sms")]
    pub total_sms: u32,
    /// Inferred from the shape when absent.
    pub policy: Option<Policy>,
    #[serde(default = "one")]
    pub n_contexts: u32,
    #[serde(default = "one")]
    pub n_streams: u32,
    #[serde(default = "default_os")]
    pub oversubscription: Oversubscription,
    #[serde(default)]
    pub kappa: f64,
}

fn default_total_sms() -> u32 {
    68
}

fn one() -> u32 {
    1
}

fn default_os() -> Oversubscription {
    Oversubscription::Value(1.0)
}

impl Default for GpuSection {
    fn default() -> Self {
        GpuSection {
            total_sms: default_total_sms(),
            policy: None,
            n_contexts: 1,
            n_streams: 1,
            oversubscription: default_os(),
            kappa: 0.0,
        }
    }
}

impl GpuSection {
    pub fn build(&self) -> Result<GpuConfig, GpuError> {
        let policy = self.policy.unwrap_or(match (self.n_contexts, self.n_streams) {
            (1, _) => Policy::Str,
            (_, 1) => Policy::Mps,
            _ => Policy::MpsStr,
        });
        GpuConfig::new(
            self.total_sms,
            self.n_contexts,
            self.n_streams,
            self.oversubscription.resolve(self.n_contexts),
            policy,
        )?
        .with_kappa(self.kappa)
    }
}

/// One explicitly described task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub priority: Priority,
    /// Release rate; exactly one of `jps` and `period` is required.
    pub jps: Option<f64>,
    pub period: Option<f64>,
    /// DNN preset providing the stages when `stages` is absent.
    pub dnn: Option<String>,
    #[serde(default)]
    pub stages: Vec<StageProfile>,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub preset: Option<String>,
    #[serde(default)]
    pub groups: Vec<TaskGroup>,
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
    /// Overrides of every group's HP count, LP count and release rate.
    pub hp_count: Option<usize>,
    pub lp_count: Option<usize>,
    pub task_jps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    #[serde(default)]
    pub hpa: bool,
    #[serde(default)]
    pub populate_order: PopulateOrder,
    #[serde(default)]
    pub edf_key: EdfKey,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub format: Option<ReportFormat>,
    pub report: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_repetitions")]
    pub afet_repetitions: usize,
    /// Aggregate demand as a multiple of GPU capacity; periods are rescaled.
    pub overload: Option<f64>,
    #[serde(default)]
    pub phase_mode: PhaseMode,
    #[serde(default)]
    pub gpu: GpuSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    /// Batch size per DNN preset name.
    #[serde(default)]
    pub batching: BTreeMap<String, u32>,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_duration() -> f64 {
    60.0
}

fn default_warmup() -> f64 {
    0.1
}

fn default_window() -> usize {
    DEFAULT_WINDOW_SIZE
}

fn default_repetitions() -> usize {
    DEFAULT_AFET_REPETITIONS
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            duration: default_duration(),
            warmup_fraction: default_warmup(),
            window_size: default_window(),
            afet_repetitions: default_repetitions(),
            overload: None,
            phase_mode: PhaseMode::default(),
            gpu: GpuSection::default(),
            workload: WorkloadSection::default(),
            scheduler: SchedulerSection::default(),
            batching: BTreeMap::new(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Toml,
    Json,
}

impl SourceFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => SourceFormat::Json,
            _ => SourceFormat::Toml,
        }
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let config = parse_scenario(&text, SourceFormat::from_path(path))?;
    config.validate()?;
    Ok(config)
}

/// Parses without semantic validation; syntax and schema errors are kept apart.
pub fn parse_scenario(text: &str, format: SourceFormat) -> Result<ScenarioConfig, ScenarioError> {
    parse_document(text, format)
}

pub(crate) fn parse_document<T: serde::de::DeserializeOwned>(
    text: &str,
    format: SourceFormat,
) -> Result<T, ScenarioError> {
    match format {
        SourceFormat::Toml => {
            let value: toml::Table = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
            value.try_into().map_err(|e: toml::de::Error| ScenarioError::Schema(e.to_string()))
        }
        SourceFormat::Json => {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
            serde_json::from_value(value).map_err(|e| ScenarioError::Schema(e.to_string()))
        }
    }
}

impl ScenarioConfig {
    /// Checks preset references and value ranges without running anything.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let schema = |m: String| Err(ScenarioError::Schema(m));
        if let Some(name) = &self.workload.preset {
            if workload_preset(name).is_none() {
                return Err(ScenarioError::UnknownPreset(name.clone()));
            }
        }
        for g in &self.workload.groups {
            if dnn_profile(&g.dnn).is_none() {
                return Err(ScenarioError::UnknownPreset(g.dnn.clone()));
            }
        }
        for (i, t) in self.workload.tasks.iter().enumerate() {
            if let Some(dnn) = &t.dnn {
                if dnn_profile(dnn).is_none() {
                    return Err(ScenarioError::UnknownPreset(dnn.clone()));
                }
            } else if t.stages.is_empty() {
                return schema(format!("workload.tasks[{i}]: needs `dnn` or `stages`"));
            }
            if t.jps.is_some() == t.period.is_some() {
                return schema(format!("workload.tasks[{i}]: set exactly one of `jps` and `period`"));
            }
        }
        for (dnn, &size) in &self.batching {
            if dnn_profile(dnn).is_none() {
                return Err(ScenarioError::UnknownPreset(dnn.clone()));
            }
            if size == 0 {
                return schema(format!("batching.{dnn}: batch size must be >= 1"));
            }
        }
        if let Some(f) = self.overload {
            if !(f.is_finite() && f > 0.0) {
                return schema(format!("overload {f} must be > 0"));
            }
        }
        if let Some(jps) = self.workload.task_jps {
            if !(jps.is_finite() && jps > 0.0) {
                return schema(format!("task_jps {jps} must be > 0"));
            }
        }
        self.gpu.build()?;
        Ok(())
    }

    /// Task groups after applying preset and overrides.
    pub fn groups(&self) -> Result<Vec<TaskGroup>, ScenarioError> {
        let mut groups = match &self.workload.preset {
            Some(name) => workload_preset(name).ok_or_else(|| ScenarioError::UnknownPreset(name.clone()))?,
            None => Vec::new(),
        };
        groups.extend(self.workload.groups.iter().cloned());
        for g in &mut groups {
            if let Some(hp) = self.workload.hp_count {
                g.hp = hp;
            }
            if let Some(lp) = self.workload.lp_count {
                g.lp = lp;
            }
            if let Some(jps) = self.workload.task_jps {
                g.jps = jps;
            }
        }
        Ok(groups)
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            ablations: AblationFlags::from_list(&self.scheduler.ablations),
            mode: SchedulerMode {
                hpa_enabled: self.scheduler.hpa,
            },
            populate_order: self.scheduler.populate_order,
            edf_key: self.scheduler.edf_key,
        }
    }

    fn batch_for(&self, dnn: Option<&str>) -> BatchProfile {
        let Some(dnn) = dnn else {
            return BatchProfile::default();
        };
        match (self.batching.get(dnn), dnn_profile(dnn)) {
            (Some(&size), Some(profile)) => BatchProfile {
                size,
                curve: profile.batching_curve(),
            },
            _ => BatchProfile::default(),
        }
    }

    fn task_specs(&self, total_sms: u32) -> Result<Vec<TaskSpec>, ScenarioError> {
        let mut specs = Vec::new();
        let mut next_id = 1u32;
        let mut push = |specs: &mut Vec<TaskSpec>, spec: TaskSpec| {
            specs.push(TaskSpec {
                id: TaskId(next_id),
                ..spec
            });
            next_id += 1;
        };
        for g in self.groups()? {
            let profile = dnn_profile(&g.dnn).ok_or_else(|| ScenarioError::UnknownPreset(g.dnn.clone()))?;
            if !(g.jps.is_finite() && g.jps > 0.0) {
                return Err(ScenarioError::Schema(format!("group {}: jps {} must be > 0", g.dnn, g.jps)));
            }
            let classes = [(Priority::High, g.hp), (Priority::Low, g.lp)];
            for (priority, count) in classes {
                for _ in 0..count {
                    let spec = TaskSpec::new(TaskId(1), 1.0 / g.jps, priority, profile.stages(total_sms))?
                        .with_batch(self.batch_for(Some(&g.dnn)))
                        .with_label(g.dnn.clone());
                    push(&mut specs, spec);
                }
            }
        }
        for t in &self.workload.tasks {
            let stages = match &t.dnn {
                Some(dnn) if t.stages.is_empty() => dnn_profile(dnn)
                    .ok_or_else(|| ScenarioError::UnknownPreset(dnn.clone()))?
                    .stages(total_sms),
                _ => t.stages.clone(),
            };
            let period = match (t.period, t.jps) {
                (Some(p), None) => p,
                (None, Some(j)) if j > 0.0 => 1.0 / j,
                _ => return Err(ScenarioError::Schema("task needs exactly one positive `jps` or `period`".into())),
            };
            let label = t.label.clone().or_else(|| t.dnn.clone()).unwrap_or_default();
            let spec = TaskSpec::new(TaskId(1), period, t.priority, stages)?
                .with_batch(self.batch_for(t.dnn.as_deref()))
                .with_label(label);
            push(&mut specs, spec);
        }
        Ok(specs)
    }

    /// Resolves presets, batching and overload into a runnable scenario.
    pub fn build(&self) -> Result<Scenario, ScenarioError> {
        self.validate()?;
        let gpu = self.gpu.build()?;
        let specs = self.task_specs(gpu.total_sms)?;
        let mut tasks = if specs.is_empty() {
            Default::default()
        } else {
            build_task_set(specs)?
        };
        if let Some(factor) = self.overload {
            tasks = scale_to_overload(&tasks, factor, gpu.total_sms)?;
        }
        Ok(Scenario {
            gpu,
            tasks,
            params: SimParams {
                duration: self.duration,
                warmup_fraction: self.warmup_fraction,
                seed: self.seed,
                window_size: self.window_size,
                afet_repetitions: self.afet_repetitions,
                phase_mode: self.phase_mode,
            },
            scheduler: self.scheduler_config(),
        })
    }
}
