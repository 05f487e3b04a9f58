//! Behaviour policies: uniform random, charge-as-fast-as-possible, and the
//! round-robin business-as-usual heuristic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{action_mask, ActionVector, Scenario, SimState};
use crate::error::Result;

pub trait Policy {
    fn name(&self) -> &str;

    /// Called once before an episode starts.
    fn reset(&mut self, _scenario: &Scenario) {}

    fn act(&mut self, scenario: &Scenario, state: &SimState) -> Result<ActionVector>;

    /// Reward of the step that followed the last `act`.
    fn observe(&mut self, _reward: f64) {}
}

/// Fraction of full charging power that covers the remaining need this step.
fn need_capped(scenario: &Scenario, state: &SimState, i: usize) -> f64 {
    let Some(j) = state.connected[i] else { return 0.0 };
    let s = &scenario.sessions[j];
    let need = (s.e_target - state.battery_energy[i]).max(0.0);
    let step_energy = s.p_charge_max * scenario.config.dt_hours;
    if step_energy <= 0.0 {
        return 0.0;
    }
    (need / step_energy).min(1.0)
}

#[derive(Debug, Clone)]
pub struct RandomPolicy {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn reset(&mut self, _scenario: &Scenario) {
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    fn act(&mut self, _scenario: &Scenario, state: &SimState) -> Result<ActionVector> {
        let values = (0..state.connected.len()).map(|_| self.rng.gen_range(-1.0..=1.0)).collect();
        Ok(ActionVector {
            values,
            mask: action_mask(state),
        })
    }
}

/// Charge as fast as possible, ignoring the setpoint.
#[derive(Debug, Clone, Default)]
pub struct CafapPolicy;

impl Policy for CafapPolicy {
    fn name(&self) -> &str {
        "cafap"
    }

    fn act(&mut self, scenario: &Scenario, state: &SimState) -> Result<ActionVector> {
        let values = (0..state.connected.len()).map(|i| need_capped(scenario, state, i)).collect();
        Ok(ActionVector::masked(state, values))
    }
}

/// Round-robin grants: starting at the pointer, each EV in cyclic charger
/// order gets its need-capped full power if that still fits under the
/// setpoint and its group limit, otherwise nothing. The pointer moves one
/// charger per step.
#[derive(Debug, Clone, Default)]
pub struct BauRoundRobin {
    pub pointer: usize,
}

impl BauRoundRobin {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Policy for BauRoundRobin {
    fn name(&self) -> &str {
        "bau"
    }

    fn reset(&mut self, _scenario: &Scenario) {
        self.pointer = 0;
    }

    fn act(&mut self, scenario: &Scenario, state: &SimState) -> Result<ActionVector> {
        let c = &scenario.config;
        let n = c.num_chargers;
        let t = state.t.min(c.horizon_t - 1);
        let mut values = vec![0.0; n];
        let mut total = 0.0;
        let mut group = vec![0.0; c.num_transformer_groups];
        for k in 0..n {
            let i = (self.pointer + k) % n;
            let Some(j) = state.connected[i] else { continue };
            let a = need_capped(scenario, state, i);
            if a <= 0.0 {
                continue;
            }
            let p = a * scenario.sessions[j].p_charge_max;
            let w = c.charger_to_group[i];
            if total + p <= c.power_setpoint[t] && group[w] + p <= c.group_limits[w][t] {
                values[i] = a;
                total += p;
                group[w] += p;
            }
        }
        if n > 0 {
            self.pointer = (self.pointer + 1) % n;
        }
        Ok(ActionVector::masked(state, values))
    }
}

/// Replays a fixed `T × chargers` action table.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    pub actions: Vec<Vec<f64>>,
}

impl Policy for ReplayPolicy {
    fn name(&self) -> &str {
        "replay"
    }

    fn act(&mut self, _scenario: &Scenario, state: &SimState) -> Result<ActionVector> {
        let values = self.actions.get(state.t).cloned().unwrap_or_else(|| vec![0.0; state.connected.len()]);
        Ok(ActionVector::masked(state, values))
    }
}
