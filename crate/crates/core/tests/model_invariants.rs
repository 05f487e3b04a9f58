use gnndt_core::dataset::{record_trajectory, Dataset, PolicyTag, WindowRef};
use gnndt_core::env::{generate_scenario, ArrivalProcess, ScenarioConfig};
use gnndt_core::graph::{invert_permutation, permute_action_graph, permute_graph, ActionGraph};
use gnndt_core::model::{EmbedderKind, GnnDt, ModelConfig, StepInput, Window};
use gnndt_core::policies::RandomPolicy;
use gnndt_tensor::{finite_difference_check, truncated_normal, Graph};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn busy_config(chargers: usize, horizon: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::synthetic(chargers, 2.min(chargers), horizon);
    c.arrival_process = ArrivalProcess {
        base_rate: 0.25,
        peaks: vec![],
    };
    c
}

fn random_dataset(chargers: usize, horizon: usize, seeds: std::ops::Range<u64>) -> Dataset {
    let c = busy_config(chargers, horizon);
    let trajs = seeds
        .map(|s| {
            let sc = generate_scenario(&c, s).unwrap();
            record_trajectory(&mut RandomPolicy::new(s), &sc, PolicyTag::Random, 1.0).unwrap()
        })
        .collect();
    Dataset::new(trajs).unwrap()
}

fn tiny_config(k: usize) -> ModelConfig {
    ModelConfig {
        context_k: k,
        embed_dim: 8,
        gnn_feature_dim: 4,
        gnn_hidden_dim: 6,
        gcn_layers_state: 2,
        gcn_layers_action: 2,
        decoder_layers: 2,
        attention_heads: 2,
        ..ModelConfig::default()
    }
}

/// Replaces every parameter with wider random values so no path is negligible.
fn scramble(model: &mut GnnDt, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in model.params.values_mut() {
        *v = truncated_normal(v.rows(), v.cols(), 0.4, &mut rng);
    }
}

fn predictions(model: &GnnDt, windows: &[Window<'_>]) -> Vec<f64> {
    let mut g = Graph::new();
    let b = model.params.bind_frozen(&mut g);
    let out = model.forward(&mut g, &b, windows).unwrap();
    g.value(out.pred).data().to_vec()
}

fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn state_embedding_is_permutation_equivariant(seed in 0u64..10_000, t in 0usize..40) {
        let ds = random_dataset(5, 48, seed..seed + 1);
        let graph = &ds.trajectories[0].steps[t].state;
        let mut model = GnnDt::new(ModelConfig::small(4)).unwrap();
        scramble(&mut model, seed);
        let (pooled, per_node) = model.embed_state(graph).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let perm = random_perm(graph.nodes.len(), &mut rng);
            let (p2, n2) = model.embed_state(&permute_graph(graph, &perm).unwrap()).unwrap();
            for (a, b) in pooled.iter().zip(&p2) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            for (old, &new) in perm.iter().enumerate() {
                for (a, b) in per_node.row_slice(old).iter().zip(n2.row_slice(new)) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn decoded_actions_ignore_node_order() {
    let ds = random_dataset(4, 32, 3..4);
    let traj = &ds.trajectories[0];
    let mut model = GnnDt::new(ModelConfig::small(3)).unwrap();
    scramble(&mut model, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let end = 20;
    let base = model.predict(&ds.window(WindowRef { traj: 0, end }, 3)).unwrap();

    let states: Vec<_> = (end - 2..=end).map(|t| traj.steps[t].state.clone()).collect();
    let perms: Vec<Vec<usize>> = states.iter().map(|s| random_perm(s.nodes.len(), &mut rng)).collect();
    let pstates: Vec<_> = states.iter().zip(&perms).map(|(s, p)| permute_graph(s, p).unwrap()).collect();
    let pactions: Vec<ActionGraph> = (end - 2..=end)
        .enumerate()
        .map(|(k, t)| {
            let a = &traj.steps[t - 1].action_graph;
            let prev_perm = if k == 0 {
                (0..traj.steps[t - 1].state.nodes.len()).collect()
            } else {
                perms[k - 1].clone()
            };
            let ap = random_perm(a.nodes.len(), &mut rng);
            permute_action_graph(a, &ap, &prev_perm).unwrap()
        })
        .collect();
    let window = Window {
        steps: (0..3)
            .map(|k| {
                let t = end - 2 + k;
                Some(StepInput {
                    state: &pstates[k],
                    prev_action: &pactions[k],
                    rtg: traj.rtg[t],
                    timestep: t,
                    target: &[],
                    mask: &[],
                })
            })
            .collect(),
    };
    let permuted = model.predict(&window).unwrap();
    for (a, b) in base.iter().zip(&permuted) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert_eq!(invert_permutation(&invert_permutation(&perms[0])), perms[0]);
}

#[test]
fn outputs_are_causal() {
    let ds = random_dataset(3, 32, 0..1);
    let traj = &ds.trajectories[0];
    let model = {
        let mut m = GnnDt::new(ModelConfig::small(6)).unwrap();
        scramble(&mut m, 4);
        m
    };
    let r = WindowRef { traj: 0, end: 20 };
    let base_window = ds.window(r, 6);
    let base = predictions(&model, std::slice::from_ref(&base_window));
    let mut g = Graph::new();
    let b = model.params.bind_frozen(&mut g);
    let slots = model.forward(&mut g, &b, std::slice::from_ref(&base_window)).unwrap().slots;
    for pos in 1..6 {
        let t = 20 + 1 + pos - 6;
        let other = &traj.steps[(t + 7) % traj.len()].state;
        let mut w = ds.window(r, 6);
        let step = w.steps[pos].as_mut().unwrap();
        step.rtg += 1234.0;
        step.timestep = (t + 3) % 32;
        step.state = other;
        let out = {
            let mut g = Graph::new();
            let b = model.params.bind_frozen(&mut g);
            let o = model.forward(&mut g, &b, std::slice::from_ref(&w)).unwrap();
            (g.value(o.pred).data().to_vec(), o.slots)
        };
        let mut compared = false;
        for (i, s) in slots.iter().enumerate().filter(|(_, s)| s.pos < pos) {
            assert_eq!(out.1[i], *s);
            assert!((out.0[i] - base[i]).abs() < 1e-9);
            compared = true;
        }
        assert!(compared || slots.iter().all(|s| s.pos >= pos));
    }
}

#[test]
fn batch_composition_does_not_change_outputs() {
    let ds = random_dataset(3, 32, 0..3);
    let mut model = GnnDt::new(ModelConfig::small(5)).unwrap();
    scramble(&mut model, 2);
    let a = ds.window(WindowRef { traj: 0, end: 2 }, 5);
    let b = ds.window(WindowRef { traj: 1, end: 17 }, 5);
    let c = ds.window(WindowRef { traj: 2, end: 30 }, 5);
    let alone = predictions(&model, std::slice::from_ref(&b));
    let together = predictions(&model, &[a, b, c]);
    let mut g = Graph::new();
    let bd = model.params.bind_frozen(&mut g);
    let windows = [
        ds.window(WindowRef { traj: 0, end: 2 }, 5),
        ds.window(WindowRef { traj: 1, end: 17 }, 5),
        ds.window(WindowRef { traj: 2, end: 30 }, 5),
    ];
    let slots = model.forward(&mut g, &bd, &windows).unwrap().slots;
    let mine: Vec<f64> = slots
        .iter()
        .zip(&together)
        .filter(|(s, _)| s.window == 1)
        .map(|(_, &v)| v)
        .collect();
    assert_eq!(mine.len(), alone.len());
    for (x, y) in mine.iter().zip(&alone) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn one_parameter_set_serves_any_site_size() {
    let model = GnnDt::new(ModelConfig::small(2)).unwrap();
    for n in (1..=50).step_by(7).chain([50]) {
        let ds = random_dataset(n, 12, 0..1);
        let w = ds.window(WindowRef { traj: 0, end: 8 }, 2);
        let mut g = Graph::new();
        let b = model.params.bind_frozen(&mut g);
        let out = model.forward(&mut g, &b, std::slice::from_ref(&w)).unwrap();
        let evs = ds.trajectories[0].steps[8].mask.iter().filter(|&&m| m).count();
        assert_eq!(out.slots.iter().filter(|s| s.pos == 1).count(), evs);
        let (pooled, per_node) = model.embed_state(&ds.trajectories[0].steps[8].state).unwrap();
        assert_eq!(pooled.len(), 16);
        assert_eq!(per_node.rows(), ds.trajectories[0].steps[8].state.nodes.len());
        assert_eq!(model.predict(&w).unwrap().len(), n);
    }
}

#[test]
fn flat_baseline_is_size_locked() {
    let flat = GnnDt::new(ModelConfig::small(2).flat_baseline(3, 2)).unwrap();
    let gnn = GnnDt::new(ModelConfig::small(2)).unwrap();
    let small = random_dataset(3, 12, 0..1);
    let big = random_dataset(6, 12, 0..1);
    let r = WindowRef { traj: 0, end: 5 };
    assert_eq!(flat.predict(&small.window(r, 2)).unwrap().len(), 3);
    assert!(flat.predict(&big.window(r, 2)).is_err());
    assert_eq!(gnn.predict(&big.window(r, 2)).unwrap().len(), 6);
}

#[test]
fn embedder_conventions() {
    let model = GnnDt::new(ModelConfig::small(2)).unwrap();
    assert_eq!(model.embed_action(&ActionGraph::default()).unwrap(), vec![0.0; 16]);
    assert!(model.embed_rtg(0.0).unwrap().iter().all(|&v| v == 0.0));
    assert_eq!(model.embed_rtg(-500.0).unwrap().len(), 64);

    let ds = random_dataset(3, 16, 0..1);
    let step = ds.trajectories[0].steps.iter().find(|s| s.action_graph.nodes.len() == 1).unwrap();
    let pooled = model.embed_action(&step.action_graph).unwrap();
    let mut single = step.action_graph.clone();
    single.edges.clear();
    assert_eq!(model.embed_action(&single).unwrap(), pooled);
}

#[test]
fn config_validation() {
    assert!(GnnDt::new(ModelConfig { context_k: 0, ..ModelConfig::default() }).is_err());
    assert!(GnnDt::new(ModelConfig { embed_dim: 30, ..ModelConfig::default() }).is_err());
    let mut c = ModelConfig::default();
    c.embedder_kind = EmbedderKind::FlatMlp;
    c.num_chargers = Some(3);
    c.num_groups = Some(1);
    assert!(GnnDt::new(c.clone()).is_err(), "flat state with residual decode");
    c.use_residual_decode = false;
    assert!(GnnDt::new(c).is_ok());
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let ds = random_dataset(2, 16, 5..7);
    for (config, seed) in [
        (tiny_config(3), 1),
        (
            ModelConfig {
                use_action_mask_loss: false,
                ..tiny_config(3)
            },
            2,
        ),
        (tiny_config(3).flat_baseline(2, 2), 3),
    ] {
        let mut model = GnnDt::new(config).unwrap();
        scramble(&mut model, seed);
        let windows = [
            ds.window(WindowRef { traj: 0, end: 1 }, 3),
            ds.window(WindowRef { traj: 1, end: 9 }, 3),
        ];
        let report = finite_difference_check(&model.params, 1e-5, Some(6), |g, b| {
            Ok(model.loss(g, b, &windows).map_err(|e| gnndt_tensor::TensorError::InvalidArgument {
                op: "loss",
                msg: e.to_string(),
            })?
            .0)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}

#[test]
fn masked_slots_get_exactly_zero_gradient() {
    let ds = random_dataset(3, 16, 0..1);
    let mut config = ModelConfig::small(3).flat_baseline(3, 2);
    config.use_action_mask_loss = true;
    let model = GnnDt::new(config).unwrap();
    let w = [ds.window(WindowRef { traj: 0, end: 10 }, 3)];
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let (loss, out) = model.loss(&mut g, &b, &w).unwrap();
    let grads = g.backward(loss).unwrap();
    let gp = grads.get(out.pred);
    let mut masked = 0;
    for (i, s) in out.slots.iter().enumerate() {
        if !s.valid {
            assert_eq!(gp.get(i, 0), 0.0);
            masked += 1;
        }
    }
    assert!(masked > 0);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = GnnDt::new(ModelConfig::small(2)).unwrap();
    scramble(&mut model, 8);
    model.save(&path, None).unwrap();
    let (back, opt) = GnnDt::load(&path).unwrap();
    assert!(opt.is_none());
    assert_eq!(back, model);
    let ds = random_dataset(3, 12, 0..1);
    let w = ds.window(WindowRef { traj: 0, end: 6 }, 2);
    assert_eq!(back.predict(&w).unwrap(), model.predict(&w).unwrap());
}
