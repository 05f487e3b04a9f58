use gnndt_core::dataset::{generate_dataset, Dataset, DatasetSpec, PolicyTag};
use gnndt_core::env::{generate_scenario, Scenario, ScenarioConfig};
use gnndt_core::model::{GnnDt, ModelConfig};
use gnndt_core::trainer::{rollout_eval, train, RtgUpdate, TargetRtgMode, TrainConfig};
use gnndt_core::CoreError;

fn data() -> (Dataset, Vec<Scenario>) {
    let c = ScenarioConfig::synthetic(3, 1, 24);
    let ds = generate_dataset(&DatasetSpec::new(c.clone(), PolicyTag::Bau, (0..6).collect())).unwrap();
    let eval = (500..503).map(|s| generate_scenario(&c, s).unwrap()).collect();
    (ds, eval)
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps_per_epoch: 6,
        epochs: 2,
        lr: 1e-3,
        warmup_steps: 3,
        seed,
        eval_scenarios: 3,
        target_rtg_mode: TargetRtgMode::DatasetBest,
        ..TrainConfig::default()
    }
}

fn small_model() -> GnnDt {
    GnnDt::new(ModelConfig {
        embed_dim: 16,
        decoder_layers: 1,
        ..ModelConfig::small(4)
    })
    .unwrap()
}

#[test]
fn zero_epochs_leaves_only_the_initial_checkpoint() {
    let (ds, eval) = data();
    let dir = tempfile::tempdir().unwrap();
    let mut model = small_model();
    let before = model.params.digest();
    let report = train(&mut model, &TrainConfig { epochs: 0, ..quick(0) }, &ds, &eval, Some(dir.path())).unwrap();
    assert!(report.loss_curve.is_empty() && report.eval_curve.is_empty());
    assert_eq!(model.params.digest(), before);
    assert!(dir.path().join("initial.ckpt").exists());
    assert!(!dir.path().join("best.ckpt").exists());
}

#[test]
fn same_seed_same_loss_curve() {
    let (ds, eval) = data();
    let run = |seed| {
        let mut m = small_model();
        let r = train(&mut m, &quick(seed), &ds, &eval, None).unwrap();
        (r.loss_curve, r.eval_curve, m.params.digest())
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.0, run(6).0);
    assert_eq!(a.0.len(), 12);
    assert_eq!(a.1.len(), 2);
}

#[test]
fn evaluation_is_read_only_and_survives_checkpoints() {
    let (ds, eval) = data();
    let dir = tempfile::tempdir().unwrap();
    let mut model = small_model();
    let report = train(&mut model, &quick(1), &ds, &eval, Some(dir.path())).unwrap();
    assert!(report.best_epoch.is_some());
    assert!(dir.path().join("loss.csv").exists() && dir.path().join("eval.csv").exists());

    let targets = vec![-100.0; eval.len()];
    let digest = model.params.digest();
    let first = rollout_eval(&model, &eval, &targets, RtgUpdate::Decrement).unwrap();
    assert_eq!(model.params.digest(), digest);
    model.save(&dir.path().join("again.ckpt"), None).unwrap();
    let (loaded, _) = GnnDt::load(&dir.path().join("again.ckpt")).unwrap();
    let second = rollout_eval(&loaded, &eval, &targets, RtgUpdate::Decrement).unwrap();
    let rewards = |m: &[gnndt_core::metrics::Metrics]| m.iter().map(|x| x.reward).collect::<Vec<_>>();
    assert_eq!(rewards(&first), rewards(&second));
    let zero = rollout_eval(&loaded, &eval, &targets, RtgUpdate::ZeroCurrent).unwrap();
    assert_eq!(zero.len(), eval.len());
}

#[test]
fn empty_site_rollout() {
    let model = small_model();
    let sc = Scenario::from_parts(ScenarioConfig::synthetic(2, 1, 8), vec![]).unwrap();
    let m = rollout_eval(&model, &[sc], &[0.0], RtgUpdate::Decrement).unwrap();
    assert_eq!(m[0].reward, 0.0);
    assert_eq!(m[0].satisfaction_pct, 100.0);
}

#[test]
fn trained_on_three_chargers_runs_on_six() {
    let (ds, eval) = data();
    let mut model = small_model();
    train(&mut model, &TrainConfig { epochs: 1, ..quick(2) }, &ds, &eval, None).unwrap();
    let big: Vec<Scenario> = (0..2)
        .map(|s| generate_scenario(&ScenarioConfig::synthetic(6, 2, 24), s).unwrap())
        .collect();
    let m = rollout_eval(&model, &big, &[-500.0, -500.0], RtgUpdate::Decrement).unwrap();
    assert!(m.iter().all(|x| x.reward.is_finite()));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let (ds, eval) = data();
    let mut model = small_model();
    model.params.get_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
    match train(&mut model, &quick(0), &ds, &eval, None) {
        Err(CoreError::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
