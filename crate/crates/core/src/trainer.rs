//! Supervised training on offline windows and return-conditioned rollouts.

use std::collections::VecDeque;
use std::path::Path;
use std::time::{Duration, Instant};

use gnndt_tensor::{clip_grad_norm, AdamW, AdamWConfig, Graph, LinearWarmup, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{mean_std, record_trajectory, sample_windows, Dataset, PolicyTag, Trajectory};
use crate::env::{ActionVector, Scenario, SimState};
use crate::error::{config_err, CoreError, Result};
use crate::graph::{build_action_graph, build_state_graph, ActionGraph, StateGraph};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{GnnDt, StepInput, Window};
use crate::oracle::{solve_for_dataset, DiscretizationSpec};
use crate::policies::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum TargetRtgMode {
    /// Budgeted oracle objective of each evaluation scenario.
    OracleEstimate,
    /// Best episode return in the training dataset.
    DatasetBest,
    Fixed(f64),
}

/// How the conditioning return evolves during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RtgUpdate {
    /// `R̂_t = R̂_{t−1} − r_{t−1}` starting from the target.
    Decrement,
    /// The current step's return token is zero.
    ZeroCurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (0 disables evaluation).
    pub eval_every: usize,
    pub eval_scenarios: usize,
    pub target_rtg_mode: TargetRtgMode,
    pub rtg_update: RtgUpdate,
    /// Node budget of the oracle used for `OracleEstimate` targets.
    pub oracle_node_budget: u64,
    /// Stop early once this much wall-clock has elapsed.
    pub time_budget_s: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps_per_epoch: 1000,
            epochs: 250,
            lr: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 1000,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 1,
            eval_scenarios: 50,
            target_rtg_mode: TargetRtgMode::OracleEstimate,
            rtg_update: RtgUpdate::Decrement,
            oracle_node_budget: 2_000,
            time_budget_s: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(config_err("batch_size and steps_per_epoch must be positive"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return Err(config_err("lr and grad_clip must be positive, weight_decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<(u64, f64)>,
    pub eval_curve: Vec<EvalPoint>,
    pub wall_seconds: f64,
    /// Epoch whose parameters were kept; `None` means the last ones.
    pub best_epoch: Option<usize>,
    pub steps_run: u64,
}

impl TrainReport {
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("loss.csv"))?;
        w.write_record(["step", "loss"])?;
        for (s, l) in &self.loss_curve {
            w.write_record(&[s.to_string(), l.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
        w.write_record(["epoch", "eval_mean", "eval_std"])?;
        for p in &self.eval_curve {
            w.write_record(&[p.epoch.to_string(), p.mean.to_string(), p.std.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One optimisation step on a fixed list of windows. Returns the loss.
pub fn train_step(
    model: &mut GnnDt,
    opt: &mut AdamW,
    windows: &[Window<'_>],
    lr: f64,
    grad_clip: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let (loss, _) = model.loss(&mut g, &b, windows)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss)?;
    let mut grads = model.params.collect_grads(&b, &mut grads);
    clip_grad_norm(&mut grads, grad_clip);
    opt.step(&mut model.params, &grads, lr)?;
    Ok(value)
}

fn batch_digest(refs: &[crate::dataset::WindowRef]) -> u64 {
    refs.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, r| {
        let h = (h ^ r.traj as u64).wrapping_mul(0x100_0000_01b3);
        (h ^ r.end as u64).wrapping_mul(0x100_0000_01b3)
    })
}

/// Conditioning targets for each evaluation scenario.
pub fn target_returns(
    mode: TargetRtgMode,
    scenarios: &[Scenario],
    dataset: Option<&Dataset>,
    oracle_node_budget: u64,
) -> Result<Vec<f64>> {
    match mode {
        TargetRtgMode::Fixed(v) => Ok(vec![v; scenarios.len()]),
        TargetRtgMode::DatasetBest => {
            let ds = dataset.ok_or_else(|| config_err("dataset_best needs a dataset"))?;
            Ok(vec![ds.best_episode_reward(); scenarios.len()])
        }
        TargetRtgMode::OracleEstimate => {
            let grid = DiscretizationSpec::default();
            scenarios
                .par_iter()
                .map(|s| Ok(solve_for_dataset(s, &grid, oracle_node_budget, None)?.objective))
                .collect()
        }
    }
}

/// Trains `model` in place, keeping the parameters of the best evaluation.
pub fn train(
    model: &mut GnnDt,
    cfg: &TrainConfig,
    dataset: &Dataset,
    eval_scenarios: &[Scenario],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(CoreError::Dataset("training dataset is empty".into()));
    }
    let k = model.config.context_k;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let schedule = LinearWarmup {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
    };
    let eval_scenarios = &eval_scenarios[..cfg.eval_scenarios.min(eval_scenarios.len())];
    let targets = if cfg.eval_every > 0 && !eval_scenarios.is_empty() && cfg.epochs > 0 {
        target_returns(cfg.target_rtg_mode, eval_scenarios, Some(dataset), cfg.oracle_node_budget)?
    } else {
        Vec::new()
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        model.save(&dir.join("initial.ckpt"), None)?;
    }

    let mut report = TrainReport {
        loss_curve: Vec::new(),
        eval_curve: Vec::new(),
        wall_seconds: 0.0,
        best_epoch: None,
        steps_run: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let budget = cfg.time_budget_s.map(Duration::from_secs_f64);
    let over_budget = |started: &Instant| budget.is_some_and(|b| started.elapsed() >= b);
    let mut step: u64 = 0;
    'epochs: for epoch in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            if over_budget(&started) {
                break 'epochs;
            }
            let refs = sample_windows(dataset, k, cfg.batch_size, &mut rng)?;
            let windows: Vec<Window<'_>> = refs.iter().map(|&r| dataset.window(r, k)).collect();
            let loss = train_step(model, &mut opt, &windows, schedule.lr(step), cfg.grad_clip)?;
            if !loss.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    step,
                    digest: batch_digest(&refs),
                });
            }
            report.loss_curve.push((step, loss));
            step += 1;
        }
        let last_epoch = epoch + 1 == cfg.epochs;
        if !targets.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            let rewards = evaluate_rewards(model, eval_scenarios, &targets, cfg.rtg_update)?;
            let (mean, std) = mean_std(&rewards);
            report.eval_curve.push(EvalPoint { epoch, mean, std });
            if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                best = Some((mean, model.params.clone()));
                report.best_epoch = Some(epoch);
                if let Some(dir) = checkpoint_dir {
                    model.save(&dir.join("best.ckpt"), Some(&opt))?;
                }
            }
        }
    }
    // A run cut short by the time budget still gets a final evaluation.
    if !targets.is_empty() && over_budget(&started) && step > 0 {
        let rewards = evaluate_rewards(model, eval_scenarios, &targets, cfg.rtg_update)?;
        let (mean, std) = mean_std(&rewards);
        let epoch = (step as usize).div_ceil(cfg.steps_per_epoch) - 1;
        if report.eval_curve.last().is_none_or(|p| p.epoch != epoch) {
            report.eval_curve.push(EvalPoint { epoch, mean, std });
            if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                best = Some((mean, model.params.clone()));
                report.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    if let Some(dir) = checkpoint_dir {
        model.save(&dir.join("final.ckpt"), None)?;
        report.write_csvs(dir)?;
    }
    report.steps_run = step;
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// A trained model acting through a sliding context of the last K steps.
pub struct DtPolicy<'m> {
    model: &'m GnnDt,
    target: f64,
    update: RtgUpdate,
    rtg: f64,
    history: VecDeque<(StateGraph, ActionGraph, f64, usize)>,
    prev_action: ActionGraph,
}

impl<'m> DtPolicy<'m> {
    pub fn new(model: &'m GnnDt, target: f64, update: RtgUpdate) -> Self {
        Self {
            model,
            target,
            update,
            rtg: target,
            history: VecDeque::new(),
            prev_action: ActionGraph::default(),
        }
    }
}

impl Policy for DtPolicy<'_> {
    fn name(&self) -> &str {
        "gnn-dt"
    }

    fn reset(&mut self, _scenario: &Scenario) {
        self.rtg = self.target;
        self.history.clear();
        self.prev_action = ActionGraph::default();
    }

    fn act(&mut self, scenario: &Scenario, state: &SimState) -> Result<ActionVector> {
        let graph = build_state_graph(state, scenario);
        let rtg = match self.update {
            RtgUpdate::Decrement => self.rtg,
            RtgUpdate::ZeroCurrent => 0.0,
        };
        let prev = std::mem::take(&mut self.prev_action);
        self.history.push_back((graph, prev, rtg, state.t));
        let k = self.model.config.context_k;
        while self.history.len() > k {
            self.history.pop_front();
        }
        let steps = self
            .history
            .iter()
            .map(|(s, a, r, t)| {
                Some(StepInput {
                    state: s,
                    prev_action: a,
                    rtg: *r,
                    timestep: *t,
                    target: &[],
                    mask: &[],
                })
            })
            .collect();
        let values = self.model.predict(&Window { steps })?;
        let action = ActionVector::masked(state, values.iter().map(|v| v.clamp(-1.0, 1.0)).collect());
        let last = &self.history.back().expect("just pushed").0;
        self.prev_action = build_action_graph(last, &action.values);
        Ok(action)
    }

    fn observe(&mut self, reward: f64) {
        self.rtg -= reward;
    }
}

/// Rolls the model through each scenario conditioned on its target return.
pub fn rollout_eval(model: &GnnDt, scenarios: &[Scenario], targets: &[f64], update: RtgUpdate) -> Result<Vec<Metrics>> {
    Ok(rollout_trajectories(model, scenarios, targets, update)?
        .iter()
        .map(compute_metrics)
        .collect())
}

pub fn rollout_trajectories(
    model: &GnnDt,
    scenarios: &[Scenario],
    targets: &[f64],
    update: RtgUpdate,
) -> Result<Vec<Trajectory>> {
    if targets.len() != scenarios.len() {
        return Err(config_err("one target return per scenario"));
    }
    scenarios
        .par_iter()
        .zip(targets)
        .map(|(s, &t)| {
            let mut policy = DtPolicy::new(model, t, update);
            record_trajectory(&mut policy, s, PolicyTag::Model, 1.0)
        })
        .collect()
}

fn evaluate_rewards(model: &GnnDt, scenarios: &[Scenario], targets: &[f64], update: RtgUpdate) -> Result<Vec<f64>> {
    Ok(rollout_eval(model, scenarios, targets, update)?
        .into_iter()
        .map(|m| m.reward)
        .collect())
}
