use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmbhinet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn vmbhinet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn metric(csv: &str, split: &str, name: &str) -> f64 {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    let row = lines.find(|l| l.starts_with(&format!("{split},"))).unwrap();
    row.split(',').nth(idx).unwrap().parse().unwrap()
}

#[test]
fn gradcheck_passes_and_lists_each_op_once() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for op in vmbhinet::verify::SUITE_OPS {
        let rows = text.lines().filter(|l| l.split_whitespace().next() == Some(op)).count();
        assert_eq!(rows, 1, "{op} in\n{text}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_detects_corrupted_rule() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["gradcheck", "--coords", "1", "--corrupt-grad", "layernorm"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("layernorm"), "{}", stderr(&o));
}

#[test]
fn short_training_is_deterministic_and_flat_at_zero_lr() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = run(
            dir.path(),
            &["train-toy", "--seed", "7", "--epochs", "10", "--out", out],
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/loss.csv")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a/checkpoint.vmbh")).unwrap(),
        fs::read(dir.path().join("b/checkpoint.vmbh")).unwrap()
    );

    let o = run(dir.path(), &["train-toy", "--lr", "0", "--epochs", "4", "--out", "z"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let totals = column(&fs::read_to_string(dir.path().join("z/loss.csv")).unwrap(), "total");
    assert_eq!(totals.len(), 4);
    assert!(totals.iter().all(|t| *t == totals[0]), "{totals:?}");
}

#[test]
fn toy_training_overfits_and_eval_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-toy", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let totals = column(&fs::read_to_string(dir.path().join("run/loss.csv")).unwrap(), "total");
    assert_eq!(totals.len(), 500);
    assert!(totals[499] < 0.1 * totals[0], "{} vs {}", totals[499], totals[0]);

    let train_metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let initial = metric(&train_metrics, "initial", "mpjpe_all");
    let o = run(dir.path(), &["eval", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eval = metric(
        &fs::read_to_string(dir.path().join("run/eval_metrics.csv")).unwrap(),
        "eval",
        "mpjpe_all",
    );
    assert_eq!(eval, metric(&train_metrics, "final", "mpjpe_all"));
    assert!(eval <= 0.3 * initial, "{eval} vs {initial}");
}

#[test]
fn eval_rejects_bad_checkpoint_and_empty_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["train-toy", "--epochs", "1", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut bytes = fs::read(dir.path().join("run/checkpoint.vmbh")).unwrap();
    bytes[0] = b'X';
    fs::write(dir.path().join("bad.vmbh"), bytes).unwrap();
    let o = run(dir.path(), &["eval", "--out", "run", "--checkpoint", "bad.vmbh"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));

    fs::write(dir.path().join("empty.json"), "[]").unwrap();
    let o = run(dir.path(), &["eval", "--out", "run", "--data-file", "empty.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));

    fs::write(dir.path().join("narrow.json"), r#"{"joints": 7}"#).unwrap();
    let o = run(dir.path(), &["eval", "--out", "run", "--config", "narrow.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hjfe.heatmap.weight"), "{}", stderr(&o));
}

#[test]
fn gen_data_feeds_eval() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(dir.path(), &["train-toy", "--epochs", "1", "--out", "run"])
            .status
            .code(),
        Some(0)
    );
    let o = run(
        dir.path(),
        &["gen-data", "--samples", "3", "--seed", "4", "--out", "data"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(
        dir.path(),
        &["eval", "--out", "run", "--data-file", "data/dataset.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("run/eval_metrics.csv")).unwrap();
    assert!(metric(&csv, "eval", "mpjpe_all").is_finite());
}

#[test]
fn bench_scan_ratios_and_single_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["bench-scan", "--seq-lengths", "1,1024,2048", "--out", "."],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("bench_scan.csv")).unwrap();
    let scan = column(&csv, "scan_flops");
    let dense = column(&csv, "dense_flops");
    let r_scan = scan[2] / scan[1];
    let r_dense = dense[2] / dense[1];
    assert!((1.9..=2.1).contains(&r_scan), "{r_scan}");
    assert!((3.8..=4.2).contains(&r_dense), "{r_dense}");

    let o = run(dir.path(), &["bench-scan", "--seq-lengths", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn count_reports_reference_totals() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["count"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("36.99") && text.contains("12.97"), "{text}");
    let o = run(dir.path(), &["count", "--profile", "toy"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn rig_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["rig-export", "--out", "rig"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rig = vmbhinet::handmodel::HandRig::load_json(&dir.path().join("rig/rig.json")).unwrap();
    assert_eq!(rig.num_vertices(), 252);
}

#[test]
fn bad_invocations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(dir.path(), &["train-toy", "--epochs", "many"]).status.code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &["train-toy", "--samples", "0"]).status.code(), Some(2));
    fs::write(dir.path().join("typo.json"), r#"{"jionts": 7}"#).unwrap();
    assert_eq!(
        run(dir.path(), &["count", "--config", "typo.json"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["count", "--config", "missing.json"]).status.code(),
        Some(2)
    );
}
