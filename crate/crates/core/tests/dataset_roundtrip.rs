use std::collections::BTreeSet;

use gnndt_core::dataset::{
    compute_rtg, generate_dataset, mix_datasets, sample_windows, Dataset, DatasetSpec, PolicyTag,
};
use gnndt_core::env::{generate_scenario, ScenarioConfig};
use gnndt_core::oracle::evaluate_plan;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(tag: PolicyTag, seeds: std::ops::Range<u64>) -> Dataset {
    generate_dataset(&DatasetSpec::new(ScenarioConfig::synthetic(3, 1, 48), tag, seeds.collect())).unwrap()
}

fn assert_rtg_identity(ds: &Dataset) {
    for t in &ds.trajectories {
        let n = t.len();
        assert_eq!(t.rtg.len(), n);
        assert_eq!(t.rtg[n - 1], t.steps[n - 1].reward);
        for k in 0..n - 1 {
            assert_eq!(t.rtg[k], t.steps[k].reward + t.gamma * t.rtg[k + 1]);
        }
    }
}

#[test]
fn every_policy_stores_consistent_returns() {
    for tag in [PolicyTag::Random, PolicyTag::Bau, PolicyTag::Cafap, PolicyTag::Optimal] {
        let ds = dataset(tag, 0..4);
        assert_rtg_identity(&ds);
        assert_eq!(ds.meta.source_mix.get(&tag), Some(&1.0));
        for t in &ds.trajectories {
            for s in &t.steps {
                for (a, m) in s.action.iter().zip(&s.mask) {
                    assert!(*m || *a == 0.0);
                    assert!((-1.0..=1.0).contains(a));
                }
                assert_eq!(s.mask, s.state.mask());
            }
        }
    }
}

#[test]
fn discounted_returns() {
    let g = compute_rtg(&[1.0, 2.0, 3.0], 0.5).unwrap();
    assert_eq!(g, vec![2.75, 3.5, 3.0]);
    assert!(compute_rtg(&[], 1.0).is_err());
    assert!(compute_rtg(&[1.0], 0.0).is_err());
}

#[test]
fn oracle_trajectories_replay_to_their_stored_return() {
    let config = ScenarioConfig::synthetic(3, 1, 48);
    let ds = generate_dataset(&DatasetSpec::new(config.clone(), PolicyTag::Optimal, vec![7, 8])).unwrap();
    for (t, seed) in ds.trajectories.iter().zip([7, 8]) {
        let sc = generate_scenario(&config, seed).unwrap();
        assert_eq!(t.scenario_digest, sc.digest());
        let (objective, _) = evaluate_plan(&sc, &t.actions()).unwrap();
        assert_eq!(objective, t.episode_reward());
    }
}

#[test]
fn file_round_trip_plain_and_gzip() {
    let ds = dataset(PolicyTag::Random, 0..3);
    let dir = tempfile::tempdir().unwrap();
    for name in ["d.jsonl", "d.jsonl.gz"] {
        let path = dir.path().join(name);
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
    }
    let mut bytes = Vec::new();
    ds.write_to(&mut bytes).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    assert!(Dataset::read_from(truncated.as_bytes()).is_err());
}

#[test]
fn mixing_takes_exact_counts() {
    let a = dataset(PolicyTag::Bau, 0..10);
    let b = dataset(PolicyTag::Random, 100..130);
    let mix = mix_datasets(&a, &b, 0.25, 20, 3).unwrap();
    assert_eq!(mix.meta.count, 20);
    assert_eq!(mix.meta.source_mix[&PolicyTag::Bau], 0.25);
    assert_eq!(mix.meta.source_mix[&PolicyTag::Random], 0.75);
    let digests: BTreeSet<_> = mix.trajectories.iter().map(|t| t.scenario_digest.clone()).collect();
    assert_eq!(digests.len(), 20, "drawn without replacement");
    assert_eq!(mix, mix_datasets(&a, &b, 0.25, 20, 3).unwrap());
    assert!(mix_datasets(&a, &b, 1.0, 20, 3).is_err());
}

#[test]
fn windows_are_left_padded_at_episode_start() {
    let ds = dataset(PolicyTag::Random, 0..2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let refs = sample_windows(&ds, 10, 500, &mut rng).unwrap();
    for r in &refs {
        assert!(r.end < ds.trajectories[r.traj].len());
        let w = ds.window(*r, 10);
        assert_eq!(w.steps.len(), 10);
        let pads = w.steps.iter().take_while(|s| s.is_none()).count();
        assert_eq!(pads, r.padding(10));
        assert!(w.steps[pads..].iter().all(Option::is_some));
        let last = w.steps[9].unwrap();
        assert_eq!(last.timestep, r.end);
        if r.end == 0 {
            assert!(last.prev_action.nodes.is_empty());
        }
    }
    assert!(sample_windows(&ds, 49, 1, &mut rng).is_err());
    assert!(sample_windows(&ds, 0, 1, &mut rng).is_err());
}
