use std::path::Path;
use std::process::{Command, Output};

fn cmod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmod")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) {
    let o = cmod(&["synth", "--out", p(dir), "--n", "6", "--k", "2", "--seed", seed]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&cmod(&["--help"])), 0);
    assert_eq!(code(&cmod(&["train", "--help"])), 0);
    let o = cmod(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    // evaluate without --checkpoint
    assert_eq!(code(&cmod(&["evaluate", "--events", "x.csv", "--nodes", "3"])), 2);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    synth(&a, "5");
    synth(&b, "5");
    synth(&c, "6");
    for f in ["events.csv", "catalog.csv", "synth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(std::fs::read(a.join("events.csv")).unwrap(), std::fs::read(c.join("events.csv")).unwrap());
}

#[test]
fn toy_gradient_check_passes() {
    let o = cmod(&["grad-check", "--toy"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn oracle_check_passes() {
    let o = cmod(&["oracle-check", "--events", "500", "--nodes", "6"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn train_evaluate_predict_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1");
    let events = data.join("events.csv");
    let catalog = data.join("catalog.csv");
    let ckpt = dir.path().join("model.ckpt");
    let history = dir.path().join("history.csv");
    let common = ["--events", p(&events), "--catalog", p(&catalog), "--train-days", "2", "--val-days", "1", "--test-days", "1"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = extra.to_vec();
        args.extend_from_slice(&common);
        cmod(&args)
    };

    let o = run(&["train", "--d", "8", "--heads", "2", "--epochs", "2", "--out", p(&ckpt), "--history", p(&history)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["best_epoch"].as_u64().unwrap() >= 1);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    let lines = std::fs::read_to_string(&history).unwrap().lines().count();
    assert_eq!(lines, 1 + summary["epochs"].as_u64().unwrap() as usize);

    let o = run(&["evaluate", "--checkpoint", p(&ckpt), "--baseline"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["model"].as_array().unwrap().len(), 2);
    assert!(report["model"][0]["mae"].as_f64().unwrap() >= 0.0);
    assert!(report["historical_average"][0]["mae"].as_f64().is_some());

    let preds = dir.path().join("preds.csv");
    let o = run(&["predict", "--checkpoint", p(&ckpt), "--out", p(&preds)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(std::fs::read_to_string(&preds).unwrap().lines().count() > 1);

    let reps = dir.path().join("reps.csv");
    let o = run(&["export-reps", "--checkpoint", p(&ckpt), "--node", "0,3", "--out", p(&reps)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["export-reps", "--checkpoint", p(&ckpt), "--node", "99", "--out", p(&reps)]);
    assert_eq!(code(&o), 2);

    let rel = dir.path().join("rel.csv");
    let o = run(&["export-relations", "--checkpoint", p(&ckpt), "--out", p(&rel)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&rel).unwrap();
    assert!(text.starts_with("timestamp,view,head,station,cluster,weight"));
    assert!(text.contains(",message,") && text.contains(",fusion,"));

    let o = run(&["evaluate", "--checkpoint", p(&dir.path().join("missing.ckpt"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("Io"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_reports_its_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2");
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let o = cmod(&["evaluate", "--events", p(&data.join("events.csv")), "--catalog", p(&data.join("catalog.csv")), "--checkpoint", p(&ckpt)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("BadMagic"), "{}", stderr(&o));
}
