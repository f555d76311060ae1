//! Configuration sweeps over policy, `N_c × N_s` shape, oversubscription and
//! seed. Cells are independent runs and may execute in parallel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::run;
use crate::gpu::{config_label, Policy};
use crate::metrics::MetricsReport;
use crate::par::{self, Execution};
use crate::scenario::{
    parse_document, OsKeyword, Oversubscription, ScenarioConfig, ScenarioError, SourceFormat,
};

pub const MIN_PARALLELISM: u32 = 2;
pub const MAX_PARALLELISM: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub policies: Vec<Policy>,
    /// `(N_c, N_s)` shapes; empty means every shape with `2 <= N_p <= 10`.
    #[serde(default)]
    pub pairs: Vec<(u32, u32)>,
    pub oversubscription: Vec<Oversubscription>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepCell {
    pub policy: Policy,
    pub n_contexts: u32,
    pub n_streams: u32,
    pub oversubscription: f64,
    pub seed: u64,
}

impl SweepCell {
    pub fn label(&self) -> String {
        config_label(self.n_contexts, self.n_streams, self.oversubscription)
    }
}

/// A requested cell that was dropped, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCell {
    pub policy: Policy,
    pub n_contexts: u32,
    pub n_streams: u32,
    pub oversubscription: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub reports: Vec<MetricsReport>,
    pub skipped: Vec<SkippedCell>,
}

fn fits(policy: Policy, nc: u32, ns: u32) -> bool {
    match policy {
        Policy::Str => nc == 1,
        Policy::Mps => ns == 1,
        Policy::MpsStr => nc >= 2 && ns >= 2,
    }
}

impl SweepSpec {
    /// Every policy, every shape with `2 <= N_p <= 10`, `OS ∈ {1, 1.5, 2, N_c}`.
    pub fn full_grid(seeds: Vec<u64>) -> Self {
        SweepSpec {
            policies: vec![Policy::Str, Policy::Mps, Policy::MpsStr],
            pairs: Vec::new(),
            oversubscription: vec![
                Oversubscription::Value(1.0),
                Oversubscription::Value(1.5),
                Oversubscription::Value(2.0),
                Oversubscription::Keyword(OsKeyword::Nc),
            ],
            seeds,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        parse_document(&text, SourceFormat::from_path(path))
    }

    fn shapes(&self) -> Result<Vec<(u32, u32)>, ScenarioError> {
        if self.pairs.is_empty() {
            let mut all = Vec::new();
            for np in MIN_PARALLELISM..=MAX_PARALLELISM {
                for nc in 1..=np {
                    if np % nc == 0 {
                        all.push((nc, np / nc));
                    }
                }
            }
            return Ok(all);
        }
        for &(nc, ns) in &self.pairs {
            let np = nc * ns;
            if !(MIN_PARALLELISM..=MAX_PARALLELISM).contains(&np) {
                return Err(ScenarioError::Schema(format!(
                    "pair {nc} × {ns}: N_p = {np} outside [{MIN_PARALLELISM}, {MAX_PARALLELISM}]"
                )));
            }
        }
        Ok(self.pairs.clone())
    }

    /// Valid cells in deterministic order, plus the cells that were skipped.
    pub fn expand(&self) -> Result<(Vec<SweepCell>, Vec<SkippedCell>), ScenarioError> {
        if self.policies.is_empty() || self.oversubscription.is_empty() || self.seeds.is_empty() {
            return Err(ScenarioError::Schema("sweep needs policies, oversubscription and seeds".into()));
        }
        let shapes = self.shapes()?;
        let mut cells = Vec::new();
        let mut skipped = Vec::new();
        for &policy in &self.policies {
            for &(nc, ns) in shapes.iter().filter(|&&(nc, ns)| fits(policy, nc, ns)) {
                let mut seen: Vec<f64> = Vec::new();
                for os in &self.oversubscription {
                    let value = os.resolve(nc);
                    if !(value >= 1.0 && value <= nc as f64) {
                        skipped.push(SkippedCell {
                            policy,
                            n_contexts: nc,
                            n_streams: ns,
                            oversubscription: value,
                            reason: format!("OS {value} outside [1, {nc}]"),
                        });
                        continue;
                    }
                    if seen.contains(&value) {
                        continue;
                    }
                    seen.push(value);
                    for &seed in &self.seeds {
                        cells.push(SweepCell {
                            policy,
                            n_contexts: nc,
                            n_streams: ns,
                            oversubscription: value,
                            seed,
                        });
                    }
                }
            }
        }
        Ok((cells, skipped))
    }
}

/// Scenario for one cell: `base` with the cell's GPU shape and seed.
pub fn cell_config(base: &ScenarioConfig, cell: &SweepCell) -> ScenarioConfig {
    let mut c = base.clone();
    c.gpu.policy = Some(cell.policy);
    c.gpu.n_contexts = cell.n_contexts;
    c.gpu.n_streams = cell.n_streams;
    c.gpu.oversubscription = Oversubscription::Value(cell.oversubscription);
    c.seed = cell.seed;
    c
}

pub fn run_sweep(spec: &SweepSpec, base: &ScenarioConfig) -> Result<SweepOutcome, ScenarioError> {
    run_sweep_with(spec, base, Execution::best())
}

pub fn run_sweep_with(
    spec: &SweepSpec,
    base: &ScenarioConfig,
    exec: Execution,
) -> Result<SweepOutcome, ScenarioError> {
    let (cells, skipped) = spec.expand()?;
    let results = par::map(exec, &cells, |cell| -> Result<MetricsReport, ScenarioError> {
        let scenario = cell_config(base, cell).build()?;
        Ok(run(&scenario)?)
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(SweepOutcome { reports, skipped })
}
