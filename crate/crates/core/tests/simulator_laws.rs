use gnndt_core::env::{
    generate_scenario, step, ActionVector, ArrivalProcess, GeneralizationShift, Scenario, ScenarioConfig, SimState,
};
use gnndt_core::policies::{BauRoundRobin, CafapPolicy, Policy, RandomPolicy};
use proptest::prelude::*;

const TOL: f64 = 1e-9;

/// Steps `scenario` under `policy`, checking every per-step law. Returns the
/// number of steps checked.
fn check_episode(scenario: &Scenario, policy: &mut dyn Policy) -> usize {
    let c = &scenario.config;
    let mut state = SimState::initial(scenario);
    policy.reset(scenario);
    for _ in 0..scenario.horizon() {
        let action = policy.act(scenario, &state).unwrap();
        let out = step(scenario, &state, &action).unwrap();
        let t = state.t;

        // energy conservation, per connected charger
        for i in 0..c.num_chargers {
            let Some(j) = state.connected[i] else {
                assert_eq!(out.applied_power[i], 0.0);
                continue;
            };
            let after = match out.departures.iter().find(|d| d.charger == i) {
                Some(d) => d.energy,
                None => out.state.battery_energy[i],
            };
            let residual = after - state.battery_energy[i] - out.applied_power[i] * c.dt_hours;
            assert!(residual.abs() < TOL, "conservation residual {residual}");
            let s = &scenario.sessions[j];
            assert!(after >= s.e_min - TOL && after <= s.e_max + TOL);
        }

        // group limits
        for w in 0..c.num_transformer_groups {
            let net: f64 = (0..c.num_chargers)
                .filter(|&i| c.charger_to_group[i] == w)
                .map(|i| out.applied_power[i])
                .sum();
            assert!(net <= c.group_limits[w][t] + TOL, "group {w} net {net}");
        }

        // reward decomposition
        let r = &out.reward;
        let mut energy = 0.0;
        for &p in &out.applied_power {
            if p > 0.0 {
                energy -= c.dt_hours * c.price_charge[t] * p;
            } else if p < 0.0 {
                energy += c.dt_hours * c.price_discharge[t] * (-p);
            }
        }
        assert!((energy - r.energy_term).abs() < TOL);
        let total_power: f64 = out.applied_power.iter().sum();
        assert!((r.violation_kw - (total_power - c.power_setpoint[t]).max(0.0)).abs() < TOL);
        let penalty: f64 = out.departures.iter().map(|d| (d.energy - d.target).powi(2)).sum();
        assert!((penalty - r.satisfaction_penalty).abs() < TOL);
        assert_eq!(
            r.total,
            r.energy_term - c.weight_violation * r.violation_kw - c.weight_satisfaction * r.satisfaction_penalty
        );
        policy.observe(r.total);
        state = out.state;
    }
    assert_eq!(state.t, scenario.horizon());
    scenario.horizon()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn laws_hold_under_random_actions(
        seed in 0u64..1_000_000,
        chargers in 1usize..6,
        groups in 1usize..3,
        horizon in 4usize..48,
    ) {
        let groups = groups.min(chargers);
        let sc = generate_scenario(&ScenarioConfig::synthetic(chargers, groups, horizon), seed).unwrap();
        check_episode(&sc, &mut RandomPolicy::new(seed));
    }

    #[test]
    fn laws_hold_for_heuristics(seed in 0u64..1_000_000, chargers in 1usize..8) {
        let sc = generate_scenario(&ScenarioConfig::synthetic(chargers, 2.min(chargers), 96), seed).unwrap();
        check_episode(&sc, &mut CafapPolicy);
        check_episode(&sc, &mut BauRoundRobin::new());
    }
}

#[test]
fn busy_site_with_shift_presets() {
    for shift in [GeneralizationShift::Small, GeneralizationShift::Medium, GeneralizationShift::Extreme] {
        let mut c = ScenarioConfig::synthetic(6, 2, 96);
        c.arrival_process = ArrivalProcess {
            base_rate: 0.3,
            peaks: vec![],
        };
        c.generalization_shift = shift;
        let sc = generate_scenario(&c, 5).unwrap();
        assert!(!sc.sessions.is_empty());
        check_episode(&sc, &mut RandomPolicy::new(1));
    }
}

#[test]
fn masked_entries_never_draw_power() {
    let sc = generate_scenario(&ScenarioConfig::synthetic(4, 1, 96), 21).unwrap();
    let mut state = SimState::initial(&sc);
    for _ in 0..sc.horizon() {
        let mut a = ActionVector::zeros(&state);
        a.values = vec![1.0; 4];
        a.mask = vec![false; 4];
        let out = step(&sc, &state, &a).unwrap();
        assert!(out.applied_power.iter().all(|&p| p == 0.0));
        state = out.state;
    }
}

#[test]
fn scenario_file_round_trip() {
    let sc = generate_scenario(&ScenarioConfig::synthetic(5, 2, 96), 77).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    sc.save(&path).unwrap();
    let back = Scenario::load(&path).unwrap();
    assert_eq!(back, sc);
    assert_eq!(back.digest(), sc.digest());
}
