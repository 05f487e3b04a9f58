//! Offline trajectory datasets: recording, returns-to-go, mixing, file I/O
//! and window sampling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{generate_scenario, step, Departure, RewardBreakdown, Scenario, ScenarioConfig, SimState};
use crate::error::{CoreError, Result};
use crate::graph::{build_action_graph, build_state_graph, ActionGraph, StateGraph};
use crate::model::{StepInput, Window};

static EMPTY_ACTION: ActionGraph = ActionGraph::EMPTY;
use crate::oracle::{solve_for_dataset, DiscretizationSpec};
use crate::policies::{BauRoundRobin, CafapPolicy, Policy, RandomPolicy, ReplayPolicy};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    Random,
    Bau,
    Cafap,
    Optimal,
    Model,
}

impl std::str::FromStr for PolicyTag {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "bau" => Ok(Self::Bau),
            "cafap" => Ok(Self::Cafap),
            "optimal" => Ok(Self::Optimal),
            "model" => Ok(Self::Model),
            other => Err(CoreError::Config(format!("unknown policy tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: StateGraph,
    /// Action values passed to the simulator (zero where masked).
    pub action: Vec<f64>,
    pub mask: Vec<bool>,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub applied_power: Vec<f64>,
    pub departures: Vec<Departure>,
    /// Derived from `state` and `action`; rebuilt on load.
    #[serde(skip)]
    pub action_graph: ActionGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario_digest: String,
    pub policy_tag: PolicyTag,
    pub num_chargers: usize,
    pub dt_hours: f64,
    pub gamma: f64,
    pub steps: Vec<TrajectoryStep>,
    pub rtg: Vec<f64>,
    /// Wall-clock spent inside the policy over the episode.
    pub policy_seconds: f64,
}

impl Trajectory {
    pub fn episode_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }

    fn rebuild_action_graphs(&mut self) {
        for s in &mut self.steps {
            s.action_graph = build_action_graph(&s.state, &s.action);
        }
    }
}

/// `G_t = r_t + γ G_{t+1}`, `G_T = r_T`.
pub fn compute_rtg(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(CoreError::Dataset("empty reward list".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::Dataset(format!("gamma {gamma} outside (0, 1]")));
    }
    let mut g = vec![0.0; rewards.len()];
    let last = rewards.len() - 1;
    g[last] = rewards[last];
    for t in (0..last).rev() {
        g[t] = rewards[t] + gamma * g[t + 1];
    }
    Ok(g)
}

/// Rolls `policy` through a full episode of `scenario`.
pub fn record_trajectory(policy: &mut dyn Policy, scenario: &Scenario, tag: PolicyTag, gamma: f64) -> Result<Trajectory> {
    policy.reset(scenario);
    let mut state = SimState::initial(scenario);
    let mut steps = Vec::with_capacity(scenario.horizon());
    let mut policy_time = Duration::ZERO;
    for _ in 0..scenario.horizon() {
        let graph = build_state_graph(&state, scenario);
        let started = Instant::now();
        let mut action = policy.act(scenario, &state)?;
        policy_time += started.elapsed();
        for (v, &m) in action.values.iter_mut().zip(&action.mask) {
            *v = if m { v.clamp(-1.0, 1.0) } else { 0.0 };
        }
        let out = step(scenario, &state, &action)?;
        policy.observe(out.reward.total);
        let action_graph = build_action_graph(&graph, &action.values);
        steps.push(TrajectoryStep {
            state: graph,
            action: action.values,
            mask: action.mask,
            reward: out.reward.total,
            breakdown: out.reward,
            applied_power: out.applied_power,
            departures: out.departures,
            action_graph,
        });
        state = out.state;
    }
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    Ok(Trajectory {
        scenario_digest: scenario.digest(),
        policy_tag: tag,
        num_chargers: scenario.num_chargers(),
        dt_hours: scenario.config.dt_hours,
        gamma,
        rtg: compute_rtg(&rewards, gamma)?,
        steps,
        policy_seconds: policy_time.as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub count: usize,
    pub avg_reward: f64,
    pub std_reward: f64,
    pub gamma: f64,
    pub source_mix: BTreeMap<PolicyTag, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileHeader {
    format_version: u32,
    scenarios_digest: String,
    #[serde(flatten)]
    meta: DatasetMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(CoreError::Dataset("a dataset needs at least one trajectory".into()));
        }
        let gamma = trajectories[0].gamma;
        if trajectories.iter().any(|t| t.gamma != gamma) {
            return Err(CoreError::Dataset("mixed discount factors".into()));
        }
        let rewards: Vec<f64> = trajectories.iter().map(Trajectory::episode_reward).collect();
        let (avg, std) = mean_std(&rewards);
        let mut counts: BTreeMap<PolicyTag, usize> = BTreeMap::new();
        for t in &trajectories {
            *counts.entry(t.policy_tag).or_insert(0) += 1;
        }
        let n = trajectories.len() as f64;
        let source_mix = counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect();
        Ok(Self {
            meta: DatasetMeta {
                count: trajectories.len(),
                avg_reward: avg,
                std_reward: std,
                gamma,
                source_mix,
            },
            trajectories,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn best_episode_reward(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::episode_reward).fold(f64::NEG_INFINITY, f64::max)
    }

    fn scenarios_digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.trajectories {
            h.update(t.scenario_digest.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes JSON lines (header, then one trajectory per line); gzip when
    /// the path ends in `.gz`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(file, Compression::fast());
            self.write_to(&mut enc)?;
            enc.finish()?.flush()?;
        } else {
            let mut file = file;
            self.write_to(&mut file)?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = FileHeader {
            format_version: DATASET_FORMAT_VERSION,
            scenarios_digest: self.scenarios_digest(),
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut *w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        if path.extension().is_some_and(|e| e == "gz") {
            Self::read_from(BufReader::new(GzDecoder::new(file)))
        } else {
            Self::read_from(BufReader::new(file))
        }
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header: FileHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(CoreError::Dataset("empty dataset file".into())),
        };
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(CoreError::Dataset(format!("unsupported format version {}", header.format_version)));
        }
        let mut trajectories = Vec::with_capacity(header.meta.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut t: Trajectory = serde_json::from_str(&line)?;
            t.rebuild_action_graphs();
            trajectories.push(t);
        }
        if trajectories.len() != header.meta.count {
            return Err(CoreError::Dataset(format!(
                "header announces {} trajectories, file holds {}",
                header.meta.count,
                trajectories.len()
            )));
        }
        let ds = Self::new(trajectories)?;
        if ds.scenarios_digest() != header.scenarios_digest {
            return Err(CoreError::Dataset("scenario digest mismatch".into()));
        }
        Ok(ds)
    }

    /// The `k`-step model input for a sampled window, left-padded at the
    /// episode start.
    pub fn window(&self, r: WindowRef, k: usize) -> Window<'_> {
        let traj = &self.trajectories[r.traj];
        let steps = (0..k)
            .map(|p| {
                let t = (r.end + 1 + p).checked_sub(k)?;
                let s = &traj.steps[t];
                Some(StepInput {
                    state: &s.state,
                    prev_action: if t == 0 {
                        &EMPTY_ACTION
                    } else {
                        &traj.steps[t - 1].action_graph
                    },
                    rtg: traj.rtg[t],
                    timestep: t,
                    target: &s.action,
                    mask: &s.mask,
                })
            })
            .collect();
        Window { steps }
    }
}

/// Sample mean and (n-1) standard deviation; std is 0 for fewer than two values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Takes `round(frac_a · total)` trajectories from `a` and the rest from `b`,
/// each without replacement, then shuffles the union.
pub fn mix_datasets(a: &Dataset, b: &Dataset, frac_a: f64, total: usize, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&frac_a) {
        return Err(CoreError::Dataset(format!("fraction {frac_a} outside [0, 1]")));
    }
    let n_a = (frac_a * total as f64).round() as usize;
    let n_b = total - n_a;
    if n_a > a.trajectories.len() || n_b > b.trajectories.len() {
        return Err(CoreError::Dataset(format!(
            "mix needs {n_a} + {n_b} trajectories, sources hold {} + {}",
            a.trajectories.len(),
            b.trajectories.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Trajectory> = index::sample(&mut rng, a.trajectories.len(), n_a)
        .into_iter()
        .map(|k| a.trajectories[k].clone())
        .collect();
    out.extend(
        index::sample(&mut rng, b.trajectories.len(), n_b)
            .into_iter()
            .map(|k| b.trajectories[k].clone()),
    );
    out.shuffle(&mut rng);
    Dataset::new(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub traj: usize,
    /// Index of the last step in the window.
    pub end: usize,
}

impl WindowRef {
    /// Number of left-padded positions for context length `k`.
    pub fn padding(&self, k: usize) -> usize {
        k.saturating_sub(self.end + 1)
    }
}

/// Uniform draws over all `(trajectory, end-step)` pairs.
pub fn sample_windows(dataset: &Dataset, k: usize, batch: usize, rng: &mut impl Rng) -> Result<Vec<WindowRef>> {
    if k == 0 {
        return Err(CoreError::Dataset("context length must be at least 1".into()));
    }
    let horizon = dataset.trajectories.iter().map(Trajectory::len).max().unwrap_or(0);
    if k > horizon {
        return Err(CoreError::Dataset(format!("context length {k} exceeds the horizon {horizon}")));
    }
    let offsets: Vec<usize> = dataset
        .trajectories
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total = dataset.total_steps();
    Ok((0..batch)
        .map(|_| {
            let g = rng.gen_range(0..total);
            let traj = offsets.partition_point(|&o| o <= g) - 1;
            WindowRef {
                traj,
                end: g - offsets[traj],
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub config: ScenarioConfig,
    pub policy: PolicyTag,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub grid: DiscretizationSpec,
    pub oracle_node_budget: u64,
}

impl DatasetSpec {
    pub fn new(config: ScenarioConfig, policy: PolicyTag, seeds: Vec<u64>) -> Self {
        Self {
            config,
            policy,
            seeds,
            gamma: 1.0,
            grid: DiscretizationSpec::uniform(11).expect("odd grid"),
            oracle_node_budget: 20_000,
        }
    }
}

/// Records one trajectory per seed (in parallel) with the requested policy.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let trajectories: Result<Vec<Trajectory>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let scenario = generate_scenario(&spec.config, seed)?;
            let mut policy: Box<dyn Policy> = match spec.policy {
                PolicyTag::Random => Box::new(RandomPolicy::new(seed ^ 0x5eed)),
                PolicyTag::Bau => Box::new(BauRoundRobin::new()),
                PolicyTag::Cafap => Box::new(CafapPolicy),
                PolicyTag::Optimal => {
                    let sol = solve_for_dataset(&scenario, &spec.grid, spec.oracle_node_budget, None)?;
                    Box::new(ReplayPolicy { actions: sol.actions })
                }
                PolicyTag::Model => {
                    return Err(CoreError::Config("model trajectories are recorded by the trainer".into()))
                }
            };
            record_trajectory(policy.as_mut(), &scenario, spec.policy, spec.gamma)
        })
        .collect();
    Dataset::new(trajectories?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[-1.0, -2.0, -3.0], 1.0).unwrap(), vec![-6.0, -5.0, -3.0]);
        assert_eq!(compute_rtg(&[-1.0, -2.0, -3.0], 0.5).unwrap(), vec![-2.75, -3.5, -3.0]);
        assert_eq!(compute_rtg(&[0.0; 4], 0.9).unwrap(), vec![0.0; 4]);
        assert!(compute_rtg(&[], 1.0).is_err());
        assert!(compute_rtg(&[1.0], 0.0).is_err());
    }

    #[test]
    fn padding_count() {
        assert_eq!(WindowRef { traj: 0, end: 3 }.padding(10), 6);
        assert_eq!(WindowRef { traj: 0, end: 3 }.padding(1), 0);
    }

    #[test]
    fn sample_statistics() {
        assert_eq!(mean_std(&[-1.0, -3.0]), (-2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
