//! Step dynamics: action scaling, battery clipping, group scaling, reward.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::scenario::Scenario;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub t: usize,
    /// Session index (into `Scenario::sessions`) per charger.
    pub connected: Vec<Option<usize>>,
    /// Battery energy per charger in kWh; 0 where nothing is connected.
    pub battery_energy: Vec<f64>,
    pub prev_total_power: f64,
}

impl SimState {
    pub fn initial(scenario: &Scenario) -> Self {
        let n = scenario.num_chargers();
        let mut s = Self {
            t: 0,
            connected: vec![None; n],
            battery_energy: vec![0.0; n],
            prev_total_power: 0.0,
        };
        connect_arrivals(scenario, &mut s, 0);
        s
    }

    pub fn num_connected(&self) -> usize {
        self.connected.iter().filter(|c| c.is_some()).count()
    }
}

fn connect_arrivals(scenario: &Scenario, s: &mut SimState, t: usize) {
    for (j, sess) in scenario.sessions.iter().enumerate() {
        if sess.t_arrival == t {
            s.connected[sess.charger_id] = Some(j);
            s.battery_energy[sess.charger_id] = sess.e_arrival;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ActionVector {
    pub fn zeros(state: &SimState) -> Self {
        Self {
            values: vec![0.0; state.connected.len()],
            mask: action_mask(state),
        }
    }

    /// Wraps raw values with the state's mask; masked values are zeroed.
    pub fn masked(state: &SimState, mut values: Vec<f64>) -> Self {
        let mask = action_mask(state);
        for (v, m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        Self { values, mask }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub energy_term: f64,
    pub violation_kw: f64,
    pub satisfaction_penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Departure {
    pub session: usize,
    pub charger: usize,
    pub energy: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: SimState,
    pub reward: RewardBreakdown,
    pub next_mask: Vec<bool>,
    /// Power actually applied per charger in kW.
    pub applied_power: Vec<f64>,
    pub departures: Vec<Departure>,
}

/// Bit i is set iff a session is connected at charger i.
pub fn action_mask(state: &SimState) -> Vec<bool> {
    state.connected.iter().map(Option::is_some).collect()
}

/// Advances one step. Entries that are masked out in either the action or
/// the state are treated as zero power.
pub fn step(scenario: &Scenario, state: &SimState, action: &ActionVector) -> Result<StepOutcome> {
    let c = &scenario.config;
    let n = c.num_chargers;
    if action.values.len() != n || action.mask.len() != n {
        return Err(CoreError::ActionLength {
            expected: n,
            got: action.values.len().min(action.mask.len()),
        });
    }
    if state.t >= c.horizon_t {
        return Err(CoreError::Horizon {
            t: state.t,
            horizon: c.horizon_t,
        });
    }
    let t = state.t;
    let dt = c.dt_hours;

    let mut power = vec![0.0; n];
    for i in 0..n {
        let Some(j) = state.connected[i] else { continue };
        if !action.mask[i] {
            continue;
        }
        let s = &scenario.sessions[j];
        let a = action.values[i].clamp(-1.0, 1.0);
        let mut p = if a >= 0.0 {
            a * s.p_charge_max
        } else {
            a * s.p_discharge_max_mag
        };
        if p.abs() < s.p_charge_min {
            p = 0.0;
        }
        let e = state.battery_energy[i];
        power[i] = p.clamp((s.e_min - e) / dt, (s.e_max - e) / dt);
    }

    // Group limits: scale the group's charging powers down to fit.
    for w in 0..c.num_transformer_groups {
        let limit = c.group_limits[w][t];
        let (mut charge, mut discharge) = (0.0, 0.0);
        for i in (0..n).filter(|&i| c.charger_to_group[i] == w) {
            if power[i] > 0.0 {
                charge += power[i];
            } else {
                discharge += power[i];
            }
        }
        if charge > 0.0 && charge + discharge > limit {
            let f = ((limit - discharge) / charge).clamp(0.0, 1.0);
            for i in (0..n).filter(|&i| c.charger_to_group[i] == w) {
                if power[i] > 0.0 {
                    power[i] *= f;
                }
            }
        }
    }

    let mut next = state.clone();
    let mut energy_term = 0.0;
    let mut total_power = 0.0;
    for i in 0..n {
        let p = power[i];
        if state.connected[i].is_some() {
            next.battery_energy[i] += p * dt;
        }
        if p > 0.0 {
            energy_term -= dt * c.price_charge[t] * p;
        } else if p < 0.0 {
            energy_term += dt * c.price_discharge[t] * (-p);
        }
        total_power += p;
    }
    let violation_kw = (total_power - c.power_setpoint[t]).max(0.0);

    let mut departures = Vec::new();
    let mut satisfaction_penalty = 0.0;
    for i in 0..n {
        let Some(j) = state.connected[i] else { continue };
        let s = &scenario.sessions[j];
        if s.t_departure == t + 1 {
            let e = next.battery_energy[i];
            satisfaction_penalty += (e - s.e_target).powi(2);
            departures.push(Departure {
                session: j,
                charger: i,
                energy: e,
                target: s.e_target,
            });
            next.connected[i] = None;
            next.battery_energy[i] = 0.0;
        }
    }
    next.t = t + 1;
    next.prev_total_power = total_power;
    if next.t < c.horizon_t {
        connect_arrivals(scenario, &mut next, t + 1);
    }

    let total = energy_term - c.weight_violation * violation_kw - c.weight_satisfaction * satisfaction_penalty;
    let next_mask = action_mask(&next);
    Ok(StepOutcome {
        state: next,
        reward: RewardBreakdown {
            energy_term,
            violation_kw,
            satisfaction_penalty,
            total,
        },
        next_mask,
        applied_power: power,
        departures,
    })
}

/// Stateful wrapper around [`step`].
#[derive(Debug, Clone)]
pub struct EvChargingEnv {
    scenario: Arc<Scenario>,
    state: SimState,
}

impl EvChargingEnv {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        let state = SimState::initial(&scenario);
        Self { scenario, state }
    }

    pub fn reset(&mut self) -> &SimState {
        self.state = SimState::initial(&self.scenario);
        &self.state
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn done(&self) -> bool {
        self.state.t >= self.scenario.horizon()
    }

    pub fn step(&mut self, action: &ActionVector) -> Result<StepOutcome> {
        let out = step(&self.scenario, &self.state, action)?;
        self.state = out.state.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::scenario::{ChargingSession, ScenarioConfig};

    pub(crate) fn session(charger: usize, ta: usize, td: usize, e: f64, target: f64, p: f64) -> ChargingSession {
        ChargingSession {
            session_id: 0,
            charger_id: charger,
            group_id: 0,
            t_arrival: ta,
            t_departure: td,
            e_arrival: e,
            e_target: target,
            e_min: 0.0,
            e_max: 60.0,
            p_charge_max: p,
            p_charge_min: 0.0,
            p_discharge_max_mag: p,
        }
    }

    fn scenario(n: usize, t: usize, sessions: Vec<ChargingSession>) -> Scenario {
        let mut c = ScenarioConfig::synthetic(n, 1, t);
        c.price_charge = vec![0.2; t];
        c.price_discharge = vec![0.18; t];
        c.power_setpoint = vec![50.0; t];
        c.group_limits = vec![vec![1000.0; t]];
        let sessions = sessions
            .into_iter()
            .enumerate()
            .map(|(j, mut s)| {
                s.session_id = j;
                s
            })
            .collect();
        Scenario::from_parts(c, sessions).unwrap()
    }

    #[test]
    fn null_action_changes_nothing() {
        let sc = scenario(1, 4, vec![session(0, 0, 4, 20.0, 48.0, 10.0)]);
        let s0 = SimState::initial(&sc);
        let out = step(&sc, &s0, &ActionVector::zeros(&s0)).unwrap();
        assert_eq!(out.reward.energy_term, 0.0);
        assert_eq!(out.reward.violation_kw, 0.0);
        assert_eq!(out.state.battery_energy[0], 20.0);
    }

    #[test]
    fn full_charge_energy_term() {
        let sc = scenario(1, 4, vec![session(0, 0, 4, 20.0, 48.0, 10.0)]);
        let s0 = SimState::initial(&sc);
        let out = step(&sc, &s0, &ActionVector::masked(&s0, vec![1.0])).unwrap();
        // -0.25 h * 0.2 EUR/kWh * 10 kW
        assert!((out.reward.energy_term + 0.5).abs() < 1e-15);
        assert_eq!(out.reward.violation_kw, 0.0);
        assert_eq!(out.state.battery_energy[0], 22.5);
    }

    #[test]
    fn departure_penalty() {
        let sc = scenario(1, 2, vec![session(0, 0, 1, 8.0, 10.0, 10.0)]);
        let s0 = SimState::initial(&sc);
        let out = step(&sc, &s0, &ActionVector::zeros(&s0)).unwrap();
        assert_eq!(out.reward.satisfaction_penalty, 4.0);
        assert_eq!(out.reward.total, -40.0);
        assert_eq!(out.next_mask, vec![false]);
        assert_eq!(out.departures.len(), 1);
    }

    #[test]
    fn battery_clip_and_snap() {
        let mut s = session(0, 0, 4, 59.0, 59.0, 10.0);
        s.p_charge_min = 3.0;
        let sc = scenario(1, 4, vec![s]);
        let s0 = SimState::initial(&sc);
        let out = step(&sc, &s0, &ActionVector::masked(&s0, vec![1.0])).unwrap();
        assert!((out.applied_power[0] - 4.0).abs() < 1e-12);
        let out = step(&sc, &s0, &ActionVector::masked(&s0, vec![0.2])).unwrap();
        assert_eq!(out.applied_power[0], 0.0);
    }

    #[test]
    fn group_limit_scales_charging_only() {
        let sc = {
            let mut c = ScenarioConfig::synthetic(3, 1, 2);
            c.group_limits = vec![vec![5.0; 2]];
            let ss = (0..3)
                .map(|i| {
                    let mut s = session(i, 0, 2, 30.0, 48.0, 10.0);
                    s.session_id = i;
                    s
                })
                .collect();
            Scenario::from_parts(c, ss).unwrap()
        };
        let s0 = SimState::initial(&sc);
        let out = step(&sc, &s0, &ActionVector::masked(&s0, vec![1.0, 0.5, -0.5])).unwrap();
        assert_eq!(out.applied_power[2], -5.0);
        let net: f64 = out.applied_power.iter().sum();
        assert!((net - 5.0).abs() < 1e-12);
        assert!((out.applied_power[0] / out.applied_power[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn arrivals_connect_and_horizon_errors() {
        let sc = scenario(3, 3, vec![session(0, 1, 3, 10.0, 20.0, 10.0), session(2, 1, 2, 10.0, 20.0, 10.0)]);
        let s0 = SimState::initial(&sc);
        assert_eq!(action_mask(&s0), vec![false, false, false]);
        let s1 = step(&sc, &s0, &ActionVector::zeros(&s0)).unwrap();
        assert_eq!(s1.next_mask, vec![true, false, true]);
        let s2 = step(&sc, &s1.state, &ActionVector::zeros(&s1.state)).unwrap();
        let s3 = step(&sc, &s2.state, &ActionVector::zeros(&s2.state)).unwrap();
        assert!(matches!(
            step(&sc, &s3.state, &ActionVector::zeros(&s3.state)),
            Err(CoreError::Horizon { .. })
        ));
        let bad = ActionVector {
            values: vec![0.0],
            mask: vec![false],
        };
        assert!(matches!(step(&sc, &s0, &bad), Err(CoreError::ActionLength { .. })));
    }
}
