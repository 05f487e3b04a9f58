use std::path::{Path, PathBuf};
use std::process::Command;

fn gnndt(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_gnndt"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .output()
        .unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn write(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

const SITE: &str = r#"{"num_chargers": 3, "num_groups": 1, "horizon_t": 24}"#;
const MODEL: &str = r#"{"context_k": 3, "embed_dim": 16, "decoder_layers": 1, "attention_heads": 2}"#;
const TRAIN: &str = r#"{"batch_size": 4, "steps_per_epoch": 4, "epochs": 1, "lr": 0.001, "warmup_steps": 2,
    "eval_scenarios": 2, "target_rtg_mode": {"mode": "fixed", "value": -200.0}}"#;

fn eval_spec(start: u64) -> String {
    format!(r#"{{"site": {SITE}, "seed_start": {start}, "count": 2}}"#)
}

fn gen_data(dir: &Path, policy: &str, start: u64, count: usize) -> PathBuf {
    let cfg = write(
        dir,
        &format!("gen-{policy}.json"),
        &format!(r#"{{"site": {SITE}, "policy": "{policy}", "seed_start": {start}, "count": {count}}}"#),
    );
    let out = dir.join(format!("data-{policy}"));
    let (code, err) = gnndt(&["gen-data", cfg.to_str().unwrap()], &out);
    assert_eq!(code, 0, "{err}");
    out.join("dataset.jsonl.gz")
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen_data(d, "bau", 0, 4);
    assert!(data.exists() && d.join("data-bau/dataset_meta.json").exists());

    let cfg = write(
        d,
        "train.json",
        &format!(
            r#"{{"dataset": {data:?}, "model": {MODEL}, "train": {TRAIN}, "select": {}, "eval": {}}}"#,
            eval_spec(100),
            eval_spec(200)
        ),
    );
    let run = d.join("run");
    let (code, err) = gnndt(&["train", cfg.to_str().unwrap(), "--seed", "3"], &run);
    assert_eq!(code, 0, "{err}");
    for f in ["initial.ckpt", "best.ckpt", "final.ckpt", "loss.csv", "eval.csv", "metrics.csv", "train_summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        header(&run.join("metrics.csv")),
        "algorithm,scenario_seed,energy_charged_kwh,energy_discharged_kwh,satisfaction_pct,violation_kw,cost_eur,reward,exec_s_per_step"
    );

    let ckpt = run.join("final.ckpt");
    let cfg = write(
        d,
        "eval.json",
        &format!(
            r#"{{"checkpoint": {ckpt:?}, "eval": {}, "baselines": ["bau", "random", "optimal"],
                "conditioning": {{"oracle_node_budget": 200}}}}"#,
            eval_spec(300)
        ),
    );
    let ev = d.join("eval");
    let (code, err) = gnndt(&["eval", cfg.to_str().unwrap()], &ev);
    assert_eq!(code, 0, "{err}");
    let table = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 * 2);
    let summary = std::fs::read_to_string(ev.join("summary.csv")).unwrap();
    let groups: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups, ["model", "bau", "random", "optimal"]);

    for (verb, cfg) in [
        (
            "scale",
            format!(
                r#"{{"checkpoint": {ckpt:?}, "charger_counts": [1, 5], "horizon_t": 24, "seed_start": 0,
                    "count": 2, "baselines": ["random"], "conditioning": {{"oracle_node_budget": 100}}}}"#
            ),
        ),
        (
            "generalize",
            format!(
                r#"{{"checkpoint": {ckpt:?}, "site": {SITE}, "shifts": ["none", "extreme"], "seed_start": 0,
                    "count": 2, "conditioning": {{"target_rtg_mode": {{"mode": "fixed", "value": -100.0}}}}}}"#
            ),
        ),
    ] {
        let p = write(d, &format!("{verb}.json"), &cfg);
        let out = d.join(verb);
        let (code, err) = gnndt(&[verb, p.to_str().unwrap()], &out);
        assert_eq!(code, 0, "{verb}: {err}");
        assert!(out.join("summary.txt").exists());
    }
    let summary = std::fs::read_to_string(d.join("scale/summary.csv")).unwrap();
    assert!(summary.contains("model@5cs") && summary.contains("random@1cs"));
}

#[test]
fn grids_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bau = gen_data(d, "bau", 0, 6);
    let random = gen_data(d, "random", 50, 6);
    let grid = |extra: &str| {
        format!(
            r#"{{"model": {MODEL}, "train": {TRAIN}, "select": {}, "eval": {}, "seeds": [1, 2], {extra}}}"#,
            eval_spec(100),
            eval_spec(200)
        )
    };

    let ablate = write(d, "ablate.json", &grid(&format!(r#""dataset": {bau:?}"#)));
    let (code, err) = gnndt(&["ablate", ablate.to_str().unwrap()], &d.join("ablate"));
    assert_eq!(code, 0, "{err}");
    let cells = std::fs::read_to_string(d.join("ablate/cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 5 * 2);
    assert!(d.join("ablate/cells/flat_dt/seed1/best.ckpt").exists());

    let k = write(d, "k.json", &grid(&format!(r#""dataset": {bau:?}, "k_values": [1, 2]"#)));
    let (code, err) = gnndt(&["sweep-k", k.to_str().unwrap(), "--seed", "7"], &d.join("k"));
    assert_eq!(code, 0, "{err}");
    let cells = std::fs::read_to_string(d.join("k/cells.csv")).unwrap();
    assert!(cells.contains("K=2,8,"), "--seed shifts the seed list:\n{cells}");

    let mix = write(
        d,
        "mix.json",
        &grid(&format!(r#""expert": {bau:?}, "filler": {random:?}, "fractions": [0.0, 0.5], "total": 6"#)),
    );
    let (code, err) = gnndt(&["sweep-mix", mix.to_str().unwrap()], &d.join("mix"));
    assert_eq!(code, 0, "{err}");
    let summary = std::fs::read_to_string(d.join("mix/summary.csv")).unwrap();
    assert!(summary.contains("expert 0%,2,") && summary.contains("expert 50%,2,"));

    let inputs = [d.join("ablate/cells.csv"), d.join("k/cells.csv")];
    let report = write(d, "report.json", &format!(r#"{{"inputs": {inputs:?}}}"#));
    let (code, err) = gnndt(&["report", report.to_str().unwrap()], &d.join("r1"));
    assert_eq!(code, 0, "{err}");
    gnndt(&["report", report.to_str().unwrap()], &d.join("r2"));
    let a = std::fs::read(d.join("r1/summary.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("r2/summary.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 5 + 2);

    let empty = write(d, "empty.csv", "group,seed,eval_mean,eval_std\n");
    let report = write(d, "empty.json", &format!(r#"{{"inputs": [{empty:?}]}}"#));
    gnndt(&["report", report.to_str().unwrap()], &d.join("r3"));
    assert_eq!(std::fs::read_to_string(d.join("r3/summary.csv")).unwrap(), "group,n,mean,std\n");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("out");

    let bad_json = write(d, "bad.json", "{ not json");
    assert_eq!(gnndt(&["gen-data", bad_json.to_str().unwrap()], &out).0, 2);
    assert_eq!(gnndt(&["gen-data", d.join("missing.json").to_str().unwrap()], &out).0, 2);
    let unknown = write(d, "unknown.json", r#"{"site": {"num_chargers": 1, "num_groups": 1, "horizon_t": 4},
        "policy": "bau", "seed_start": 0, "count": 1, "colour": "red"}"#);
    assert_eq!(gnndt(&["gen-data", unknown.to_str().unwrap()], &out).0, 2);
    let invalid = write(d, "invalid.json", r#"{"site": {"num_chargers": 2, "num_groups": 1, "horizon_t": 0},
        "policy": "bau", "seed_start": 0, "count": 1}"#);
    assert_eq!(gnndt(&["gen-data", invalid.to_str().unwrap()], &out).0, 2);

    let missing_data = write(
        d,
        "train.json",
        &format!(r#"{{"dataset": "/nonexistent/data.jsonl", "select": {}}}"#, eval_spec(0)),
    );
    assert_eq!(gnndt(&["train", missing_data.to_str().unwrap()], &out).0, 2);

    let garbage = write(d, "garbage.ckpt", "not a checkpoint");
    write(d, "garbage.ckpt.json", MODEL);
    let eval = write(d, "eval.json", &format!(r#"{{"checkpoint": {garbage:?}, "eval": {}}}"#, eval_spec(0)));
    assert_eq!(gnndt(&["eval", eval.to_str().unwrap()], &out).0, 3);

    assert_eq!(gnndt(&["no-such-verb"], &out).0, 2);
}
