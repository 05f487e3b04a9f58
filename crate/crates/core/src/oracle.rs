//! Exact solver for the full-information scheduling problem over a
//! discretized action grid.
//!
//! Both modes run a depth-first search over steps, enumerating the joint
//! grid choice of all occupied chargers at each step (charger order inside a
//! step), and evaluate every transition with the simulator itself, so
//! clipping and group scaling are modelled exactly. Branch-and-bound prunes
//! with `partial reward + optimistic suffix`, where the suffix assumes no
//! violation, no departure deficit and the best grid energy term per
//! occupied charger.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::env::{step, ActionVector, Scenario, SimState};
use crate::error::{config_err, CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationSpec {
    pub levels: Vec<f64>,
}

impl DiscretizationSpec {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if !levels.contains(&0.0) {
            return Err(config_err("discretization must contain 0"));
        }
        if levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(config_err("discretization levels must be strictly increasing"));
        }
        if levels.iter().any(|l| !(-1.0..=1.0).contains(l)) {
            return Err(config_err("discretization levels must lie in [-1, 1]"));
        }
        Ok(Self { levels })
    }

    /// `n` evenly spaced levels over [-1, 1]; `n` must be odd so 0 is included.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 3 || n % 2 == 0 {
            return Err(config_err("uniform grid needs an odd count >= 3"));
        }
        let half = (n / 2) as f64;
        Self::new((0..n).map(|k| (k as f64 - half) / half).collect())
    }

    /// Nearest level for each value.
    pub fn snap(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|&v| {
                *self
                    .levels
                    .iter()
                    .min_by(|a, b| (*a - v).abs().total_cmp(&(*b - v).abs()))
                    .expect("non-empty grid")
            })
            .collect()
    }
}

impl Default for DiscretizationSpec {
    fn default() -> Self {
        Self {
            levels: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Exhaustive,
    BranchAndBound,
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub mode: SolveMode,
    /// Largest number of complete plans exhaustive mode will enumerate.
    pub search_cap: f64,
    pub node_budget: Option<u64>,
    pub time_budget: Option<Duration>,
    /// Seed branch-and-bound with a coordinate-descent plan on the same grid.
    pub warm_start: bool,
}

impl OracleOptions {
    pub fn new(mode: SolveMode) -> Self {
        Self {
            mode,
            search_cap: 5e6,
            node_budget: None,
            time_budget: None,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub actions: Vec<Vec<f64>>,
    pub objective: f64,
    pub node_count: u64,
    /// False when a budget stopped the search before it was exhausted.
    pub proven_optimal: bool,
}

/// Replays a plan and returns the episode reward (sequential sum of step
/// rewards) and the applied power table.
pub fn evaluate_plan(scenario: &Scenario, actions: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut state = SimState::initial(scenario);
    let mut total = 0.0;
    let mut applied = Vec::with_capacity(scenario.horizon());
    for t in 0..scenario.horizon() {
        let out = step(scenario, &state, &ActionVector::masked(&state, actions[t].clone()))?;
        total += out.reward.total;
        applied.push(out.applied_power);
        state = out.state;
    }
    Ok((total, applied))
}

/// Chargers occupied at step `t` according to the session table.
fn occupied(scenario: &Scenario, t: usize) -> Vec<usize> {
    let mut v: Vec<usize> = scenario
        .sessions
        .iter()
        .filter(|s| s.t_arrival <= t && t < s.t_departure)
        .map(|s| s.charger_id)
        .collect();
    v.sort_unstable();
    v
}

/// `suffix[t]` = optimistic reward obtainable from step `t` to the end.
fn optimistic_suffix(scenario: &Scenario, levels: &[f64]) -> Vec<f64> {
    let c = &scenario.config;
    let t_max = scenario.horizon();
    let mut per_step = vec![0.0; t_max];
    for s in &scenario.sessions {
        for t in s.t_arrival..s.t_departure {
            let best = levels
                .iter()
                .map(|&l| {
                    if l >= 0.0 {
                        -c.dt_hours * c.price_charge[t] * l * s.p_charge_max
                    } else {
                        c.dt_hours * c.price_discharge[t] * (-l) * s.p_discharge_max_mag
                    }
                })
                .fold(0.0, f64::max);
            per_step[t] += best;
        }
    }
    let mut suffix = vec![0.0; t_max + 1];
    for t in (0..t_max).rev() {
        suffix[t] = suffix[t + 1] + per_step[t];
    }
    suffix
}

struct Search<'a> {
    scenario: &'a Scenario,
    levels: &'a [f64],
    occupied: Vec<Vec<usize>>,
    suffix: Vec<f64>,
    prune: bool,
    best: f64,
    best_plan: Option<Vec<Vec<f64>>>,
    current: Vec<Vec<f64>>,
    nodes: u64,
    node_budget: Option<u64>,
    deadline: Option<Instant>,
    stopped: bool,
}

struct Child {
    reward: f64,
    values: Vec<f64>,
    state: SimState,
}

impl Search<'_> {
    fn out_of_budget(&mut self) -> bool {
        if self.stopped {
            return true;
        }
        let over_nodes = self.node_budget.is_some_and(|b| self.nodes >= b);
        let over_time = self.deadline.is_some_and(|d| Instant::now() >= d);
        if over_nodes || over_time {
            self.stopped = true;
        }
        self.stopped
    }

    fn dfs(&mut self, state: &SimState, acc: f64) -> Result<()> {
        let t = state.t;
        if t == self.scenario.horizon() {
            if acc > self.best || self.best_plan.is_none() {
                self.best = acc;
                self.best_plan = Some(self.current.clone());
            }
            return Ok(());
        }
        let n = self.scenario.num_chargers();
        let occ = self.occupied[t].clone();
        let mut digits = vec![0usize; occ.len()];
        let mut children = Vec::new();
        loop {
            let mut values = vec![0.0; n];
            for (k, &i) in occ.iter().enumerate() {
                values[i] = self.levels[digits[k]];
            }
            let out = step(self.scenario, state, &ActionVector::masked(state, values.clone()))?;
            self.nodes += 1;
            children.push(Child {
                reward: out.reward.total,
                values,
                state: out.state,
            });
            // odometer increment
            let mut k = 0;
            while k < digits.len() {
                digits[k] += 1;
                if digits[k] < self.levels.len() {
                    break;
                }
                digits[k] = 0;
                k += 1;
            }
            if k == digits.len() {
                break;
            }
        }
        if self.prune {
            children.sort_by(|a, b| b.reward.total_cmp(&a.reward));
        }
        for child in children {
            if self.out_of_budget() {
                return Ok(());
            }
            let value = acc + child.reward;
            if self.prune && self.best_plan.is_some() {
                let margin = 1e-9 * (1.0 + self.best.abs());
                if value + self.suffix[t + 1] < self.best - margin {
                    // children are sorted, so the rest cannot do better
                    break;
                }
            }
            self.current[t] = child.values;
            self.dfs(&child.state, value)?;
        }
        Ok(())
    }
}

/// Number of complete plans over the grid, as `f64` (may be huge).
pub fn search_size(scenario: &Scenario, spec: &DiscretizationSpec) -> f64 {
    let l = (spec.levels.len() as f64).ln();
    let log: f64 = (0..scenario.horizon()).map(|t| occupied(scenario, t).len() as f64 * l).sum();
    log.exp()
}

pub fn oracle_solve(scenario: &Scenario, spec: &DiscretizationSpec, mode: SolveMode) -> Result<OracleSolution> {
    oracle_solve_with(scenario, spec, &OracleOptions::new(mode))
}

pub fn oracle_solve_with(scenario: &Scenario, spec: &DiscretizationSpec, opts: &OracleOptions) -> Result<OracleSolution> {
    DiscretizationSpec::new(spec.levels.clone())?;
    let t_max = scenario.horizon();
    let n = scenario.num_chargers();
    if opts.mode == SolveMode::Exhaustive {
        let size = search_size(scenario, spec);
        if size > opts.search_cap {
            return Err(CoreError::SearchCap {
                size,
                cap: opts.search_cap,
            });
        }
    }
    let mut search = Search {
        scenario,
        levels: &spec.levels,
        occupied: (0..t_max).map(|t| occupied(scenario, t)).collect(),
        suffix: optimistic_suffix(scenario, &spec.levels),
        prune: opts.mode == SolveMode::BranchAndBound,
        best: f64::NEG_INFINITY,
        best_plan: None,
        current: vec![vec![0.0; n]; t_max],
        nodes: 0,
        node_budget: opts.node_budget,
        deadline: opts.time_budget.map(|d| Instant::now() + d),
        stopped: false,
    };
    if search.prune && opts.warm_start {
        let plan = coordinate_descent(scenario, &spec.levels, 4)?;
        let (obj, _) = evaluate_plan(scenario, &plan)?;
        search.best = obj;
        search.best_plan = Some(plan);
    }
    search.dfs(&SimState::initial(scenario), 0.0)?;
    let stopped = search.stopped;
    let actions = search.best_plan.unwrap_or_else(|| vec![vec![0.0; n]; t_max]);
    // Report the objective of an actual replay so it always matches the env.
    let (objective, _) = evaluate_plan(scenario, &actions)?;
    Ok(OracleSolution {
        actions,
        objective,
        node_count: search.nodes,
        proven_optimal: !stopped,
    })
}

/// Best single-session schedule on the grid with all other chargers' applied
/// powers held fixed. Levels whose charging would push the group over its
/// limit are excluded. Returns the level per step of the session.
fn session_dp(
    scenario: &Scenario,
    j: usize,
    levels: &[f64],
    others_total: &[f64],
    others_group: &[f64],
) -> Vec<f64> {
    let c = &scenario.config;
    let s = &scenario.sessions[j];
    let dt = c.dt_hours;
    let w = s.group_id;
    struct Node {
        energy: f64,
        value: f64,
        parent: usize,
        level: f64,
    }
    let mut layers: Vec<Vec<Node>> = vec![vec![Node {
        energy: s.e_arrival,
        value: 0.0,
        parent: 0,
        level: 0.0,
    }]];
    for t in s.t_arrival..s.t_departure {
        let prev = layers.last().expect("layer");
        let mut next: Vec<Node> = Vec::new();
        let mut index: BTreeMap<i64, usize> = BTreeMap::new();
        let base_violation = (others_total[t] - c.power_setpoint[t]).max(0.0);
        for (pi, node) in prev.iter().enumerate() {
            for &l in levels {
                let mut p = if l >= 0.0 {
                    l * s.p_charge_max
                } else {
                    l * s.p_discharge_max_mag
                };
                if p.abs() < s.p_charge_min {
                    p = 0.0;
                }
                p = p.clamp((s.e_min - node.energy) / dt, (s.e_max - node.energy) / dt);
                if p > 0.0 && others_group[t] + p > c.group_limits[w][t] {
                    continue;
                }
                let energy_term = if p >= 0.0 {
                    -dt * c.price_charge[t] * p
                } else {
                    dt * c.price_discharge[t] * (-p)
                };
                let violation = (others_total[t] + p - c.power_setpoint[t]).max(0.0) - base_violation;
                let e = node.energy + p * dt;
                let mut value = node.value + energy_term - c.weight_violation * violation;
                if t + 1 == s.t_departure {
                    value -= c.weight_satisfaction * (e - s.e_target).powi(2);
                }
                let key = (e * 1e9).round() as i64;
                match index.get(&key) {
                    Some(&k) if next[k].value >= value => {}
                    Some(&k) => {
                        next[k] = Node {
                            energy: e,
                            value,
                            parent: pi,
                            level: l,
                        }
                    }
                    None => {
                        index.insert(key, next.len());
                        next.push(Node {
                            energy: e,
                            value,
                            parent: pi,
                            level: l,
                        });
                    }
                }
            }
        }
        if next.is_empty() {
            // every level blocked: idle
            next.push(Node {
                energy: prev[0].energy,
                value: prev[0].value,
                parent: 0,
                level: 0.0,
            });
        }
        layers.push(next);
    }
    let last = layers.last().expect("layer");
    let mut k = (0..last.len())
        .max_by(|&a, &b| last[a].value.total_cmp(&last[b].value))
        .expect("non-empty");
    let mut out = vec![0.0; layers.len() - 1];
    for li in (1..layers.len()).rev() {
        out[li - 1] = layers[li][k].level;
        k = layers[li][k].parent;
    }
    out
}

/// Session-by-session coordinate descent from the all-zero plan. Each sweep
/// re-optimizes one session exactly (on the grid) against the others and
/// keeps the change only when the replayed episode reward improves.
pub fn coordinate_descent(scenario: &Scenario, levels: &[f64], max_sweeps: usize) -> Result<Vec<Vec<f64>>> {
    let c = &scenario.config;
    let n = c.num_chargers;
    let mut plan = vec![vec![0.0; n]; scenario.horizon()];
    let (mut best, mut applied) = evaluate_plan(scenario, &plan)?;
    for _ in 0..max_sweeps {
        let mut improved = false;
        for (j, s) in scenario.sessions.iter().enumerate() {
            let i = s.charger_id;
            let others_total: Vec<f64> = applied
                .iter()
                .map(|row| row.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, p)| p).sum())
                .collect();
            let others_group: Vec<f64> = applied
                .iter()
                .map(|row| {
                    (0..n)
                        .filter(|&k| k != i && c.charger_to_group[k] == s.group_id)
                        .map(|k| row[k])
                        .sum()
                })
                .collect();
            let sched = session_dp(scenario, j, levels, &others_total, &others_group);
            let mut candidate = plan.clone();
            for (k, t) in (s.t_arrival..s.t_departure).enumerate() {
                candidate[t][i] = sched[k];
            }
            let (obj, app) = evaluate_plan(scenario, &candidate)?;
            if obj > best {
                best = obj;
                plan = candidate;
                applied = app;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(plan)
}

/// Oracle used for dataset generation at moderate scale: coordinate descent
/// on the grid, then budgeted branch-and-bound from that incumbent.
pub fn solve_for_dataset(
    scenario: &Scenario,
    spec: &DiscretizationSpec,
    node_budget: u64,
    time_budget: Option<Duration>,
) -> Result<OracleSolution> {
    let opts = OracleOptions {
        node_budget: Some(node_budget),
        time_budget,
        ..OracleOptions::new(SolveMode::BranchAndBound)
    };
    oracle_solve_with(scenario, spec, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ChargingSession, ScenarioConfig};

    fn two_step() -> Scenario {
        let mut c = ScenarioConfig::synthetic(1, 1, 2);
        c.price_charge = vec![0.5, 0.1];
        c.price_discharge = vec![0.45, 0.09];
        c.power_setpoint = vec![100.0; 2];
        c.group_limits = vec![vec![100.0; 2]];
        let s = ChargingSession {
            session_id: 0,
            charger_id: 0,
            group_id: 0,
            t_arrival: 0,
            t_departure: 2,
            e_arrival: 20.0,
            e_target: 22.5,
            e_min: 0.0,
            e_max: 60.0,
            p_charge_max: 10.0,
            p_charge_min: 0.0,
            p_discharge_max_mag: 10.0,
        };
        Scenario::from_parts(c, vec![s]).unwrap()
    }

    #[test]
    fn defers_to_cheap_step() {
        let sc = two_step();
        let spec = DiscretizationSpec::new(vec![0.0, 1.0]).unwrap();
        for mode in [SolveMode::Exhaustive, SolveMode::BranchAndBound] {
            let sol = oracle_solve(&sc, &spec, mode).unwrap();
            assert_eq!(sol.actions, vec![vec![0.0], vec![1.0]]);
            assert!((sol.objective + 0.25).abs() < 1e-12, "{}", sol.objective);
            assert!(sol.proven_optimal);
        }
    }

    #[test]
    fn empty_scenario() {
        let c = ScenarioConfig::synthetic(2, 1, 3);
        let sc = Scenario::from_parts(c, vec![]).unwrap();
        let sol = oracle_solve(&sc, &DiscretizationSpec::default(), SolveMode::BranchAndBound).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.actions, vec![vec![0.0; 2]; 3]);
    }

    #[test]
    fn exhaustive_cap() {
        let sc = two_step();
        let opts = OracleOptions {
            search_cap: 3.0,
            ..OracleOptions::new(SolveMode::Exhaustive)
        };
        let spec = DiscretizationSpec::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(oracle_solve_with(&sc, &spec, &opts), Err(CoreError::SearchCap { .. })));
    }

    #[test]
    fn grid_validation_and_snap() {
        assert!(DiscretizationSpec::new(vec![-1.0, 1.0]).is_err());
        assert!(DiscretizationSpec::new(vec![0.0, 2.0]).is_err());
        let g = DiscretizationSpec::uniform(5).unwrap();
        assert_eq!(g, DiscretizationSpec::default());
        assert_eq!(g.snap(&[0.3, -0.9, 0.72]), vec![0.5, -1.0, 0.5]);
    }
}
