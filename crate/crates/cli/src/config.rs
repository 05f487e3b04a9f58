//! JSON configuration files, one shape per verb. Omitted fields take the
//! defaults below; unknown fields are rejected where the shape allows it.

use std::path::{Path, PathBuf};

use gnndt_core::dataset::PolicyTag;
use gnndt_core::env::GeneralizationShift;
use gnndt_core::experiments::{EvalSpec, SiteSpec};
use gnndt_core::model::ModelConfig;
use gnndt_core::trainer::{RtgUpdate, TargetRtgMode, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Fails with a config error when a referenced input file is missing.
pub fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn one() -> f64 {
    1.0
}
fn eleven() -> usize {
    11
}
fn oracle_budget() -> u64 {
    20_000
}
fn dataset_file() -> String {
    "dataset.jsonl.gz".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub site: SiteSpec,
    pub policy: PolicyTag,
    pub seed_start: u64,
    pub count: usize,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Action levels of the oracle's uniform grid.
    #[serde(default = "eleven")]
    pub oracle_levels: usize,
    #[serde(default = "oracle_budget")]
    pub oracle_node_budget: u64,
    #[serde(default = "dataset_file")]
    pub file_name: String,
}

/// How a trained model is conditioned and rolled out at evaluation time.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    #[serde(default = "oracle_mode")]
    pub target_rtg_mode: TargetRtgMode,
    #[serde(default = "decrement")]
    pub rtg_update: RtgUpdate,
    #[serde(default = "oracle_budget")]
    pub oracle_node_budget: u64,
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            target_rtg_mode: oracle_mode(),
            rtg_update: decrement(),
            oracle_node_budget: oracle_budget(),
        }
    }
}

fn oracle_mode() -> TargetRtgMode {
    TargetRtgMode::OracleEstimate
}
fn decrement() -> RtgUpdate {
    RtgUpdate::Decrement
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Scenarios used to pick the kept checkpoint.
    pub select: EvalSpec,
    /// Optional disjoint test set scored once after training.
    #[serde(default)]
    pub eval: Option<EvalSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmdConfig {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Needed only by the `dataset_best` target mode.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub eval: EvalSpec,
    #[serde(default)]
    pub baselines: Vec<PolicyTag>,
    #[serde(default)]
    pub conditioning: Conditioning,
}

/// Shared by the training grids (`ablate`, `sweep-k`, `sweep-mix`).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Training data for `ablate` and `sweep-k`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub select: EvalSpec,
    pub eval: EvalSpec,
    pub seeds: Vec<u64>,
    #[serde(default = "k_values")]
    pub k_values: Vec<usize>,
    /// `sweep-mix`: expert and filler datasets, expert fractions, set size.
    #[serde(default)]
    pub expert: Option<PathBuf>,
    #[serde(default)]
    pub filler: Option<PathBuf>,
    #[serde(default = "fractions")]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub total: Option<usize>,
}

fn k_values() -> Vec<usize> {
    vec![2, 5, 10, 20]
}
fn fractions() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralizeConfig {
    pub checkpoint: PathBuf,
    pub site: SiteSpec,
    #[serde(default = "shifts")]
    pub shifts: Vec<GeneralizationShift>,
    pub seed_start: u64,
    pub count: usize,
    #[serde(default)]
    pub baselines: Vec<PolicyTag>,
    #[serde(default)]
    pub conditioning: Conditioning,
}

fn shifts() -> Vec<GeneralizationShift> {
    use GeneralizationShift::*;
    vec![None, Small, Medium, Extreme]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub checkpoint: PathBuf,
    pub charger_counts: Vec<usize>,
    /// Transformer groups per site; defaults to one group per 3 chargers.
    #[serde(default)]
    pub num_groups: Option<usize>,
    pub horizon_t: usize,
    pub seed_start: u64,
    pub count: usize,
    #[serde(default)]
    pub baselines: Vec<PolicyTag>,
    #[serde(default)]
    pub conditioning: Conditioning,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Cell tables (`cells.csv`) written by the grid verbs.
    pub inputs: Vec<PathBuf>,
    #[serde(default)]
    pub title: Option<String>,
}
