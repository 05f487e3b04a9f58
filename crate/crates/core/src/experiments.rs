//! Experiment grids (ablation, context sweep, dataset mixing, generalization,
//! scale) and the summary tables built from their cells.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::dataset::{mean_std, mix_datasets, record_trajectory, Dataset, PolicyTag, Trajectory};
use crate::env::{generate_scenario, GeneralizationShift, Scenario, ScenarioConfig};
use crate::error::{config_err, Result};
use crate::metrics::{compute_metrics, MetricsRow};
use crate::model::{EmbedderKind, GnnDt, ModelConfig};
use crate::oracle::{solve_for_dataset, DiscretizationSpec};
use crate::policies::{BauRoundRobin, CafapPolicy, Policy, RandomPolicy, ReplayPolicy};
use crate::trainer::{rollout_trajectories, target_returns, train, RtgUpdate, TargetRtgMode, TrainConfig, TrainReport};

/// A synthetic site: charger count, groups, horizon and distribution shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub num_chargers: usize,
    pub num_groups: usize,
    pub horizon_t: usize,
    #[serde(default = "no_shift")]
    pub shift: GeneralizationShift,
}

fn no_shift() -> GeneralizationShift {
    GeneralizationShift::None
}

impl SiteSpec {
    pub fn new(num_chargers: usize, num_groups: usize, horizon_t: usize) -> Self {
        Self {
            num_chargers,
            num_groups,
            horizon_t,
            shift: GeneralizationShift::None,
        }
    }

    pub fn config(&self) -> ScenarioConfig {
        let mut c = ScenarioConfig::synthetic(self.num_chargers, self.num_groups, self.horizon_t);
        c.generalization_shift = self.shift;
        c
    }

    pub fn scenarios(&self, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<Scenario>> {
        let c = self.config();
        seeds.into_iter().map(|s| generate_scenario(&c, s)).collect()
    }
}

/// Held-out evaluation scenarios: `count` seeds starting at `seed_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub site: SiteSpec,
    pub seed_start: u64,
    pub count: usize,
}

impl EvalSpec {
    pub fn seeds(&self) -> Vec<u64> {
        (self.seed_start..self.seed_start + self.count as u64).collect()
    }

    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        self.site.scenarios(self.seeds())
    }
}

/// Outcome of training one model and evaluating it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub group: String,
    pub seed: u64,
    pub eval_mean: f64,
    pub eval_std: f64,
    pub rewards: Vec<f64>,
}

/// Trains a fresh model, keeping the parameters that score best on `select`,
/// and evaluates them on `eval`. Pass the same scenarios twice to select and
/// report on one set.
pub fn train_and_evaluate(
    group: &str,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    select: &[Scenario],
    eval: &[Scenario],
    checkpoint_dir: Option<&Path>,
) -> Result<(Cell, GnnDt, TrainReport)> {
    let mut model = GnnDt::new(ModelConfig {
        init_seed: train_config.seed,
        ..model_config.clone()
    })?;
    let report = train(&mut model, train_config, dataset, select, checkpoint_dir)?;
    let rewards = evaluate_model(&model, eval, train_config, Some(dataset))?;
    let (eval_mean, eval_std) = mean_std(&rewards);
    Ok((
        Cell {
            group: group.to_string(),
            seed: train_config.seed,
            eval_mean,
            eval_std,
            rewards,
        },
        model,
        report,
    ))
}

/// Episode rewards of `model` on `eval` with the configured conditioning target.
pub fn evaluate_model(model: &GnnDt, eval: &[Scenario], cfg: &TrainConfig, dataset: Option<&Dataset>) -> Result<Vec<f64>> {
    let targets = target_returns(cfg.target_rtg_mode, eval, dataset, cfg.oracle_node_budget)?;
    Ok(rollout_trajectories(model, eval, &targets, cfg.rtg_update)?
        .iter()
        .map(|t| t.episode_reward())
        .collect())
}

/// Episode rewards of a fixed policy on each scenario.
pub fn baseline_rewards(tag: PolicyTag, eval: &[Scenario], seed: u64) -> Result<Vec<f64>> {
    Ok(baseline_trajectories(tag, eval, seed, DEFAULT_ORACLE_BUDGET)?
        .iter()
        .map(|t| t.episode_reward())
        .collect())
}

const DEFAULT_ORACLE_BUDGET: u64 = 20_000;

/// One trajectory per scenario under a fixed policy. The Optimal tag replays
/// the budgeted oracle plan on the default 11-level grid.
pub fn baseline_trajectories(tag: PolicyTag, eval: &[Scenario], seed: u64, oracle_budget: u64) -> Result<Vec<Trajectory>> {
    eval.par_iter()
        .enumerate()
        .map(|(k, s)| {
            let mut p: Box<dyn Policy> = if tag == PolicyTag::Optimal {
                let grid = DiscretizationSpec::uniform(11)?;
                Box::new(ReplayPolicy {
                    actions: solve_for_dataset(s, &grid, oracle_budget, None)?.actions,
                })
            } else {
                baseline_policy(tag, seed.wrapping_add(k as u64))?
            };
            record_trajectory(p.as_mut(), s, tag, 1.0)
        })
        .collect()
}

pub fn baseline_policy(tag: PolicyTag, seed: u64) -> Result<Box<dyn Policy>> {
    Ok(match tag {
        PolicyTag::Random => Box::new(RandomPolicy::new(seed)),
        PolicyTag::Bau => Box::new(BauRoundRobin::new()),
        PolicyTag::Cafap => Box::new(CafapPolicy),
        other => return Err(config_err(format!("`{other:?}` is not a fixed baseline policy"))),
    })
}

/// Metrics rows for a policy (or model, via `label`) on each scenario.
pub fn metrics_rows(label: &str, trajectories: &[Trajectory], seeds: &[u64]) -> Vec<MetricsRow> {
    trajectories
        .iter()
        .zip(seeds)
        .map(|(t, &s)| MetricsRow {
            algorithm: label.to_string(),
            scenario_seed: s,
            metrics: compute_metrics(t),
        })
        .collect()
}

/// The five ablation rows, from the plain decision transformer up to the
/// full model.
pub fn ablation_rows(base: &ModelConfig, num_chargers: usize, num_groups: usize) -> Vec<(&'static str, ModelConfig)> {
    let with = |state: EmbedderKind, action: EmbedderKind, residual: bool, mask: bool| ModelConfig {
        embedder_kind: state,
        action_embedder_kind: action,
        use_residual_decode: residual,
        use_action_mask_loss: mask,
        num_chargers: Some(num_chargers),
        num_groups: Some(num_groups),
        ..base.clone()
    };
    use EmbedderKind::{FlatMlp, Gnn};
    vec![
        ("flat DT", with(FlatMlp, FlatMlp, false, false)),
        ("+state GNN", with(Gnn, FlatMlp, false, false)),
        ("+residual", with(Gnn, FlatMlp, true, false)),
        ("+action GNN", with(Gnn, Gnn, true, false)),
        ("+mask", with(Gnn, Gnn, true, true)),
    ]
}

/// Builds the dataset for one mixing cell: `fraction` of `total` from
/// `expert`, the rest from `filler`.
pub fn mix_cell(expert: &Dataset, filler: &Dataset, fraction: f64, total: usize, seed: u64) -> Result<Dataset> {
    mix_datasets(expert, filler, fraction, total, seed)
}

/// Summary row: mean ± sample std of one group's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Groups cells in order of first appearance and summarizes their eval means.
pub fn summarize(cells: &[Cell]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for c in cells {
        if !order.contains(&c.group.as_str()) {
            order.push(&c.group);
        }
    }
    order
        .into_iter()
        .map(|g| {
            let values: Vec<f64> = cells.iter().filter(|c| c.group == g).map(|c| c.eval_mean).collect();
            let (mean, std) = mean_std(&values);
            SummaryRow {
                group: g.to_string(),
                n: values.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_cells_csv(w: impl Write, cells: &[Cell]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["group", "seed", "eval_mean", "eval_std"])?;
    for c in cells {
        out.write_record(&[c.group.clone(), c.seed.to_string(), c.eval_mean.to_string(), c.eval_std.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cells_csv(r: impl std::io::Read) -> Result<Vec<Cell>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut cells = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| config_err(format!("bad number `{}` in cell table", field(i))))
        };
        cells.push(Cell {
            group: field(0).to_string(),
            seed: field(1).parse().map_err(|_| config_err("bad seed in cell table"))?,
            eval_mean: num(2)?,
            eval_std: num(3)?,
            rewards: Vec::new(),
        });
    }
    Ok(cells)
}

pub fn write_summary_csv(w: impl Write, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["group", "n", "mean", "std"])?;
    for r in rows {
        out.write_record(&[r.group.clone(), r.n.to_string(), r.mean.to_string(), r.std.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width text table of a summary.
pub fn render_summary(title: &str, rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.group.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{title}\n{:<width$}  {:>3}  {:>12}  {:>10}\n", "group", "n", "mean", "std");
    for r in rows {
        s.push_str(&format!("{:<width$}  {:>3}  {:>12.2}  {:>10.2}\n", r.group, r.n, r.mean, r.std));
    }
    s
}

/// Default conditioning used by the grids.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        target_rtg_mode: TargetRtgMode::OracleEstimate,
        rtg_update: RtgUpdate::Decrement,
        ..TrainConfig::default()
    }
}
