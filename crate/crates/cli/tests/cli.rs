use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--synthetic",
    "ring:4:300",
    "--hidden",
    "4",
    "--embed-dim",
    "3",
    "--horizon",
    "4",
    "--epochs",
    "2",
    "--batch",
    "16",
];

fn mstfgrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstfgrn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("MSTF_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mstfgrn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_small(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn train_writes_run_directory() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_small(&run, &[]);
    for f in [
        "config.json",
        "normalizer.json",
        "baseline_ha.json",
        "train_log.csv",
        "model.mstf",
        "model.mstf.json",
        "report.json",
        "report.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = read(&run.join("train_log.csv"));
    assert_eq!(log.lines().count(), 3);
    let csv = read(&run.join("report.csv"));
    assert_eq!(csv.lines().next(), Some("horizon,mae,rmse,mape"));
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn eval_reproduces_training_report() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_small(&run, &[]);
    ok(&["eval", "--run", run.to_str().unwrap()]);
    let a: serde_json::Value = serde_json::from_str(&read(&run.join("report.json"))).unwrap();
    let b: serde_json::Value = serde_json::from_str(&read(&run.join("eval_report.json"))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_with_mismatched_variant_is_a_checkpoint_error() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_small(&run, &[]);
    let out = mstfgrn(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--variant",
        "no_attention",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn missing_flow_file_exits_with_input_error() {
    let tmp = TempDir::new().unwrap();
    let edges = tmp.path().join("edges.csv");
    std::fs::write(&edges, "from,to,cost\n0,1,1\n").unwrap();
    let flows = tmp.path().join("absent_flow.csv");
    let out = mstfgrn(&[
        "train",
        "--edges",
        edges.to_str().unwrap(),
        "--flows",
        flows.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent_flow.csv"));
}

#[test]
fn unknown_variant_is_rejected() {
    let out = mstfgrn(&["train", "--synthetic", "ring:4:300", "--variant", "no_such"]);
    assert_eq!(out.status.code(), Some(2));
}

fn window_csv(path: &Path, rows: usize) {
    let mut s = String::from("a,b,c,d\n");
    for t in 0..rows {
        let row: Vec<String> = (0..4).map(|n| format!("{}", 250 + 10 * t + n)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn predict_writes_one_row_per_step_deterministically() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_small(&run, &[]);
    let window = tmp.path().join("window.csv");
    window_csv(&window, 4);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let output = tmp.path().join(format!("forecast{k}.csv"));
        ok(&[
            "predict",
            "--run",
            run.to_str().unwrap(),
            "--window",
            window.to_str().unwrap(),
            "--output",
            output.to_str().unwrap(),
        ]);
        outputs.push(read(&output));
    }
    assert_eq!(outputs[0], outputs[1]);
    let lines: Vec<&str> = outputs[0].lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(lines[0], "0,1,2,3");
    for row in &lines[1..] {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 4);
        assert!(vals.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn predict_rejects_wrong_window_length() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_small(&run, &[]);
    let window = tmp.path().join("window.csv");
    window_csv(&window, 3);
    let out = mstfgrn(&[
        "predict",
        "--run",
        run.to_str().unwrap(),
        "--window",
        window.to_str().unwrap(),
        "--output",
        tmp.path().join("f.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("window"));
}

#[test]
fn repeats_write_summary_with_mean_and_std() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    train_small(&run, &["--repeats", "3"]);
    for k in 0..3 {
        assert!(run.join(format!("run_{k}/report.json")).exists());
    }
    let s: serde_json::Value = serde_json::from_str(&read(&run.join("summary.json"))).unwrap();
    assert_eq!(s["runs"], 3);
    assert!(s["mean"]["mae"].as_f64().unwrap() > 0.0);
    assert!(s["std"]["mae"].as_f64().unwrap() >= 0.0);
}

#[test]
fn ablate_reports_every_variant() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("abl");
    let mut args = vec!["ablate", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(&args);
    let csv = read(&out.join("ablation.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,mae,rmse,mape,val_mae");
    assert_eq!(lines.len(), 6);
    for v in [
        "full",
        "no_node_embedding",
        "no_adjacency_matrix",
        "no_reverse",
        "no_attention",
    ] {
        assert!(lines.iter().any(|l| l.starts_with(&format!("{v},"))), "{v}");
        assert!(out.join(v).join("model.mstf").exists());
    }
}

#[test]
fn rerun_from_stored_config_is_bitwise_identical_in_f64() {
    let tmp = TempDir::new().unwrap();
    let first = tmp.path().join("first");
    train_small(&first, &["--dtype", "f64"]);
    let second = tmp.path().join("second");
    ok(&[
        "train",
        "--config",
        first.join("config.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(
        read(&first.join("report.json")),
        read(&second.join("report.json"))
    );
    assert_eq!(
        std::fs::read(first.join("model.mstf")).unwrap(),
        std::fs::read(second.join("model.mstf")).unwrap()
    );
}

#[test]
fn gen_output_trains_from_files() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    ok(&[
        "gen",
        "--synthetic",
        "grid:4:300",
        "--out",
        data.to_str().unwrap(),
    ]);
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--edges",
        data.join("edges.csv").to_str().unwrap(),
        "--flows",
        data.join("flow.csv").to_str().unwrap(),
        "--hidden",
        "4",
        "--horizon",
        "4",
        "--epochs",
        "1",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(run.join("report.json").exists());
}
