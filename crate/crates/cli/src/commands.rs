use std::fs::File;
use std::path::{Path, PathBuf};

use gnndt_core::dataset::{generate_dataset, Dataset, DatasetSpec, PolicyTag};
use gnndt_core::env::Scenario;
use gnndt_core::experiments::{
    ablation_rows, baseline_trajectories, metrics_rows, mix_cell, read_cells_csv, render_summary, summarize,
    train_and_evaluate, write_cells_csv, write_summary_csv, Cell, EvalSpec, SiteSpec, SummaryRow,
};
use gnndt_core::metrics::{write_metrics_csv, MetricsRow};
use gnndt_core::model::{GnnDt, ModelConfig};
use gnndt_core::oracle::DiscretizationSpec;
use gnndt_core::trainer::{rollout_trajectories, target_returns, train as train_model, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, Conditioning, GridConfig, ReportConfig};
use crate::CliError;

pub struct Context {
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Context {
    fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn create(&self, name: &str) -> Result<File, CliError> {
        Ok(File::create(self.out_dir()?.join(name))?)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        std::fs::write(self.out_dir()?.join(name), serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    /// `seeds` shifted so the first one is the `--seed` override.
    fn seed_list(&self, seeds: &[u64]) -> Vec<u64> {
        match self.seed {
            Some(s) => (0..seeds.len() as u64).map(|k| s + k).collect(),
            None => seeds.to_vec(),
        }
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    config::require(path, "dataset")?;
    Ok(Dataset::load(path)?)
}

fn load_model(path: &Path) -> Result<GnnDt, CliError> {
    config::require(path, "checkpoint")?;
    Ok(GnnDt::load(path)?.0)
}

pub fn gen_data(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: config::GenDataConfig = config::load(path)?;
    let start = ctx.seed.unwrap_or(c.seed_start);
    let mut spec = DatasetSpec::new(c.site.config(), c.policy, (start..start + c.count as u64).collect());
    spec.gamma = c.gamma;
    spec.grid = DiscretizationSpec::uniform(c.oracle_levels)?;
    spec.oracle_node_budget = c.oracle_node_budget;
    let ds = generate_dataset(&spec)?;
    ds.save(&ctx.out_dir()?.join(&c.file_name))?;
    ctx.write_json("dataset_meta.json", &ds.meta)?;
    eprintln!(
        "{} {:?} trajectories, mean return {:.2} ± {:.2}",
        ds.meta.count, c.policy, ds.meta.avg_reward, ds.meta.std_reward
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps_run: u64,
    wall_seconds: f64,
    best_epoch: Option<usize>,
    final_loss: Option<f64>,
    test: Option<SummaryRow>,
}

pub fn train(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let mut c: config::TrainCmdConfig = config::load(path)?;
    if let Some(s) = ctx.seed {
        c.train.seed = s;
    }
    let dataset = load_dataset(&c.dataset)?;
    let select = c.select.scenarios()?;
    let mut model = GnnDt::new(ModelConfig {
        init_seed: c.train.seed,
        ..c.model.clone()
    })?;
    let out = ctx.out_dir()?.to_path_buf();
    let report = train_model(&mut model, &c.train, &dataset, &select, Some(&out))?;
    let test = match &c.eval {
        Some(spec) => {
            let rows = model_rows(&model, "model", spec, &conditioning_of(&c.train), Some(&dataset))?;
            write_metrics_csv(ctx.create("metrics.csv")?, &rows)?;
            summarize(&reward_cells(&rows)).into_iter().next()
        }
        None => None,
    };
    ctx.write_json(
        "train_summary.json",
        &TrainSummary {
            steps_run: report.steps_run,
            wall_seconds: report.wall_seconds,
            best_epoch: report.best_epoch,
            final_loss: report.loss_curve.last().map(|p| p.1),
            test,
        },
    )?;
    eprintln!("trained {} steps in {:.1} s", report.steps_run, report.wall_seconds);
    Ok(())
}

fn conditioning_of(t: &TrainConfig) -> Conditioning {
    Conditioning {
        target_rtg_mode: t.target_rtg_mode,
        rtg_update: t.rtg_update,
        oracle_node_budget: t.oracle_node_budget,
    }
}

/// Metrics rows of a model rolled out on `spec`.
fn model_rows(
    model: &GnnDt,
    label: &str,
    spec: &EvalSpec,
    cond: &Conditioning,
    dataset: Option<&Dataset>,
) -> Result<Vec<MetricsRow>, CliError> {
    let scenarios = spec.scenarios()?;
    let targets = target_returns(cond.target_rtg_mode, &scenarios, dataset, cond.oracle_node_budget)?;
    let trajs = rollout_trajectories(model, &scenarios, &targets, cond.rtg_update)?;
    Ok(metrics_rows(label, &trajs, &spec.seeds()))
}

fn baseline_rows(
    tags: &[PolicyTag],
    scenarios: &[Scenario],
    seeds: &[u64],
    seed: u64,
    budget: u64,
    suffix: &str,
) -> Result<Vec<MetricsRow>, CliError> {
    let mut rows = Vec::new();
    for &tag in tags {
        let trajs = baseline_trajectories(tag, scenarios, seed, budget)?;
        let label = format!("{}{suffix}", serde_json::to_value(tag)?.as_str().unwrap_or("policy"));
        rows.extend(metrics_rows(&label, &trajs, seeds));
    }
    Ok(rows)
}

/// One pseudo-cell per metrics row, so per-algorithm rewards summarize
/// through the same table code as the grids.
fn reward_cells(rows: &[MetricsRow]) -> Vec<Cell> {
    rows.iter()
        .map(|r| Cell {
            group: r.algorithm.clone(),
            seed: r.scenario_seed,
            eval_mean: r.metrics.reward,
            eval_std: 0.0,
            rewards: vec![r.metrics.reward],
        })
        .collect()
}

fn write_eval_outputs(ctx: &Context, title: &str, rows: &[MetricsRow]) -> Result<(), CliError> {
    write_metrics_csv(ctx.create("metrics.csv")?, rows)?;
    let summary = summarize(&reward_cells(rows));
    write_summary_csv(ctx.create("summary.csv")?, &summary)?;
    let text = render_summary(title, &summary);
    std::fs::write(ctx.out_dir()?.join("summary.txt"), &text)?;
    eprint!("{text}");
    Ok(())
}

pub fn eval(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: config::EvalCmdConfig = config::load(path)?;
    if c.checkpoint.is_none() && c.baselines.is_empty() {
        return Err(CliError::Config("nothing to evaluate: give a checkpoint or baselines".into()));
    }
    let dataset = c.dataset.as_deref().map(load_dataset).transpose()?;
    let model = c.checkpoint.as_deref().map(load_model).transpose()?;
    let scenarios = c.eval.scenarios()?;
    let seeds = c.eval.seeds();
    let mut rows = Vec::new();
    if let Some(m) = &model {
        rows.extend(model_rows(m, "model", &c.eval, &c.conditioning, dataset.as_ref())?);
    }
    let seed = ctx.seed.unwrap_or(0);
    rows.extend(baseline_rows(&c.baselines, &scenarios, &seeds, seed, c.conditioning.oracle_node_budget, "")?);
    write_eval_outputs(ctx, "reward per algorithm (mean ± std over scenarios)", &rows)
}

/// A grid cell: label, model config, training seed and its dataset.
struct GridCell<'d> {
    label: String,
    model: ModelConfig,
    seed: u64,
    dataset: std::borrow::Cow<'d, Dataset>,
}

fn run_grid(ctx: &Context, title: &str, c: &GridConfig, cells: Vec<GridCell<'_>>) -> Result<(), CliError> {
    if cells.is_empty() {
        return Err(CliError::Config("the grid has no cells".into()));
    }
    let select = c.select.scenarios()?;
    let eval = c.eval.scenarios()?;
    let root = ctx.out_dir()?.join("cells");
    let done: Result<Vec<Cell>, CliError> = cells
        .par_iter()
        .map(|cell| {
            let dir = root.join(slug(&cell.label)).join(format!("seed{}", cell.seed));
            let tc = TrainConfig {
                seed: cell.seed,
                ..c.train.clone()
            };
            let (done, _, _) = train_and_evaluate(&cell.label, &cell.model, &tc, &cell.dataset, &select, &eval, Some(&dir))?;
            eprintln!("{} seed {}: {:.2}", cell.label, cell.seed, done.eval_mean);
            Ok(done)
        })
        .collect();
    let done = done?;
    write_cells_csv(ctx.create("cells.csv")?, &done)?;
    write_summary(ctx, title, &summarize(&done))
}

fn write_summary(ctx: &Context, title: &str, rows: &[SummaryRow]) -> Result<(), CliError> {
    write_summary_csv(ctx.create("summary.csv")?, rows)?;
    ctx.write_json("summary.json", &rows)?;
    let text = render_summary(title, rows);
    std::fs::write(ctx.out_dir()?.join("summary.txt"), &text)?;
    eprint!("{text}");
    Ok(())
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|ch| if ch.is_ascii_alphanumeric() { ch.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string()
}

fn grid_dataset(c: &GridConfig) -> Result<Dataset, CliError> {
    let path = c
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Config("`dataset` is required".into()))?;
    load_dataset(path)
}

pub fn ablate(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: GridConfig = config::load(path)?;
    let ds = grid_dataset(&c)?;
    let site = &c.eval.site;
    let seeds = ctx.seed_list(&c.seeds);
    let mut cells = Vec::new();
    for (label, model) in ablation_rows(&c.model, site.num_chargers, site.num_groups) {
        for &seed in &seeds {
            cells.push(GridCell {
                label: label.to_string(),
                model: model.clone(),
                seed,
                dataset: std::borrow::Cow::Borrowed(&ds),
            });
        }
    }
    run_grid(ctx, "ablation: average reward over seeds", &c, cells)
}

pub fn sweep_k(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: GridConfig = config::load(path)?;
    let ds = grid_dataset(&c)?;
    let seeds = ctx.seed_list(&c.seeds);
    let mut cells = Vec::new();
    for &k in &c.k_values {
        for &seed in &seeds {
            cells.push(GridCell {
                label: format!("K={k}"),
                model: ModelConfig {
                    context_k: k,
                    ..c.model.clone()
                },
                seed,
                dataset: std::borrow::Cow::Borrowed(&ds),
            });
        }
    }
    run_grid(ctx, "context length sweep: average reward over seeds", &c, cells)
}

pub fn sweep_mix(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: GridConfig = config::load(path)?;
    let need = |p: &Option<PathBuf>, what: &str| {
        p.as_deref()
            .ok_or_else(|| CliError::Config(format!("`{what}` is required")))
            .and_then(load_dataset)
    };
    let expert = need(&c.expert, "expert")?;
    let filler = need(&c.filler, "filler")?;
    let total = c
        .total
        .ok_or_else(|| CliError::Config("`total` is required".into()))?;
    let seeds = ctx.seed_list(&c.seeds);
    let mut cells = Vec::new();
    for &f in &c.fractions {
        for &seed in &seeds {
            let mixed = mix_cell(&expert, &filler, f, total, seed)?;
            cells.push(GridCell {
                label: format!("expert {:.0}%", 100.0 * f),
                model: c.model.clone(),
                seed,
                dataset: std::borrow::Cow::Owned(mixed),
            });
        }
    }
    run_grid(ctx, "dataset mixing: average reward over seeds", &c, cells)
}

/// Rolls a checkpoint and the baselines out on each site, labelling rows
/// `<algorithm>@<site>`.
fn multi_site_eval(
    ctx: &Context,
    title: &str,
    checkpoint: &Path,
    sites: Vec<(String, SiteSpec)>,
    seed_start: u64,
    count: usize,
    baselines: &[PolicyTag],
    cond: &Conditioning,
) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let seed = ctx.seed.unwrap_or(0);
    let mut rows = Vec::new();
    for (name, site) in sites {
        let spec = EvalSpec {
            site,
            seed_start,
            count,
        };
        rows.extend(model_rows(&model, &format!("model@{name}"), &spec, cond, None)?);
        let suffix = format!("@{name}");
        rows.extend(baseline_rows(
            baselines,
            &spec.scenarios()?,
            &spec.seeds(),
            seed,
            cond.oracle_node_budget,
            &suffix,
        )?);
    }
    write_eval_outputs(ctx, title, &rows)
}

pub fn generalize(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: config::GeneralizeConfig = config::load(path)?;
    let sites = c
        .shifts
        .iter()
        .map(|&shift| {
            let name = serde_json::to_value(shift).ok().and_then(|v| v.as_str().map(String::from));
            (name.unwrap_or_default(), SiteSpec { shift, ..c.site.clone() })
        })
        .collect();
    multi_site_eval(
        ctx,
        "generalization: reward per algorithm and shift",
        &c.checkpoint,
        sites,
        c.seed_start,
        c.count,
        &c.baselines,
        &c.conditioning,
    )
}

pub fn scale(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: config::ScaleConfig = config::load(path)?;
    if c.charger_counts.contains(&0) {
        return Err(CliError::Config("charger counts must be positive".into()));
    }
    let sites = c
        .charger_counts
        .iter()
        .map(|&n| {
            let groups = c.num_groups.unwrap_or(n.div_ceil(3)).clamp(1, n);
            (format!("{n}cs"), SiteSpec::new(n, groups, c.horizon_t))
        })
        .collect();
    multi_site_eval(
        ctx,
        "scale: reward per algorithm and site size",
        &c.checkpoint,
        sites,
        c.seed_start,
        c.count,
        &c.baselines,
        &c.conditioning,
    )
}

pub fn report(ctx: &Context, path: &Path) -> Result<(), CliError> {
    let c: ReportConfig = config::load(path)?;
    let mut cells = Vec::new();
    for input in &c.inputs {
        config::require(input, "cell table")?;
        cells.extend(read_cells_csv(File::open(input)?)?);
    }
    let title = c.title.as_deref().unwrap_or("summary (mean ± std over seeds)");
    write_summary(ctx, title, &summarize(&cells))
}
