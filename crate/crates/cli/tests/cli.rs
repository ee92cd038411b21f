use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use epicode_core::checkpoint::{self, Tensor, TensorMap};

fn epicode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epicode"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn save_map(path: &Path, entries: &[(&str, Vec<usize>, Vec<f32>)]) {
    let mut m = TensorMap::new();
    for (name, shape, data) in entries {
        m.insert(*name, Tensor::new(shape.clone(), data.clone()).unwrap()).unwrap();
    }
    checkpoint::save(&m, path).unwrap();
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn help_exits_zero() {
    let o = epicode(&["theory", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("--epsilon"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = epicode(&["theory", "--bogus-flag", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bogus-flag"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = epicode(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn malformed_column_reference_is_a_usage_error() {
    let o = epicode(&["ttest", "--a", "nocolumn", "--b", "x.csv:b"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn incompatible_checkpoints_exit_two_with_report() {
    let dir = tempfile::tempdir().unwrap();
    save_map(&dir.path().join("a.st"), &[("w", vec![2], vec![1.0, 2.0]), ("head.w", vec![1], vec![0.0])]);
    save_map(&dir.path().join("b.st"), &[("w", vec![2], vec![1.0, 2.0])]);
    let o = epicode(&[
        "extrapolate",
        "--strong",
        &p(dir.path(), "a.st"),
        "--weak",
        &p(dir.path(), "b.st"),
        "--mu",
        "0.5",
        "--out",
        &p(dir.path(), "ep.st"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("head.w"), "{}", stderr(&o));
    assert!(!dir.path().join("ep.st").exists());
}

#[test]
fn overflow_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    save_map(&dir.path().join("s.st"), &[("w", vec![1], vec![3e38])]);
    save_map(&dir.path().join("w.st"), &[("w", vec![1], vec![-3e38])]);
    let o = epicode(&[
        "extrapolate",
        "--strong",
        &p(dir.path(), "s.st"),
        "--weak",
        &p(dir.path(), "w.st"),
        "--mu",
        "1",
        "--out",
        &p(dir.path(), "ep.st"),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn missing_file_exits_two() {
    let o = epicode(&["distance", "--a", "/nonexistent/a", "--b", "/nonexistent/b"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn extrapolate_interpolate_distance() {
    let dir = tempfile::tempdir().unwrap();
    save_map(&dir.path().join("ft.st"), &[("w", vec![2], vec![3.0, 0.0])]);
    save_map(&dir.path().join("early.st"), &[("w", vec![2], vec![0.0, 4.0])]);
    let o = epicode(&["distance", "--a", &p(dir.path(), "ft.st"), "--b", &p(dir.path(), "early.st")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "5");

    let o = epicode(&[
        "extrapolate",
        "--strong",
        &p(dir.path(), "ft.st"),
        "--weak",
        &p(dir.path(), "early.st"),
        "--mu",
        "0.5",
        "--out",
        &p(dir.path(), "ep.st"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ep = checkpoint::load(dir.path().join("ep.st")).unwrap();
    assert_eq!(ep.get("w").unwrap().data(), &[4.5, -2.0]);
    let o = epicode(&["distance", "--a", &p(dir.path(), "ft.st"), "--b", &p(dir.path(), "ep.st")]);
    assert_eq!(stdout(&o).trim(), "2.5");

    let o = epicode(&[
        "interpolate",
        "--a",
        &p(dir.path(), "ft.st"),
        "--b",
        &p(dir.path(), "early.st"),
        "--t",
        "0.25",
        "--out",
        &p(dir.path(), "mid.st"),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let mid = checkpoint::load(dir.path().join("mid.st")).unwrap();
    assert_eq!(mid.get("w").unwrap().data(), &[0.75, 3.0]);
}

#[test]
fn theory_row_is_reproducible() {
    let args = [
        "theory", "--epsilon", "1", "--k", "2", "--lambda", "0.5", "--rho", "1", "--vocab", "4", "--trials", "2000",
        "--seed", "3", "--header",
    ];
    let a = epicode(&args);
    let b = epicode(&[&args[..], &["--threads", "1"]].concat());
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("epsilon,k,lambda,rho"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 13);
    let predicted: f64 = row[8].parse().unwrap();
    assert!((predicted - 0.5).abs() < 1e-12);
}

#[test]
fn theory_rejects_invalid_scenario() {
    let o = epicode(&[
        "theory", "--epsilon", "1", "--k", "0.5", "--lambda", "0.5", "--rho", "1", "--vocab", "4", "--trials", "10",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ttest_on_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(&csv, "seed,a,b\n0,0.61,0.57\n1,0.58,0.58\n2,0.64,0.60\n3,0.66,0.61\n4,0.60,0.62\n5,0.59,0.55\n").unwrap();
    let c = csv.to_str().unwrap();
    let o = epicode(&["ttest", "--a", &format!("{c}:a"), "--b", &format!("{c}:b")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["degrees_of_freedom"], 5);
    let pv = v["p_value_one_tailed"].as_f64().unwrap();
    assert!(pv > 0.0 && pv < 0.1);
    let o = epicode(&["ttest", "--a", &format!("{c}:a"), "--b", &format!("{c}:missing")]);
    assert_eq!(o.status.code(), Some(2));
}

const TINY_MODEL: &str = r#"{"d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16, "max_context": 16}"#;
const TINY_TASK: &str = r#"{"n_train": 24, "n_dev": 8, "n_test": 9}"#;

#[test]
fn data_train_evaluate_decode_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("model.json"), TINY_MODEL).unwrap();
    fs::write(d.join("task.json"), TINY_TASK).unwrap();
    fs::write(d.join("grid.json"), r#"{"mu_values": [0.1, 0.2], "lambda_values": [0.5]}"#).unwrap();

    let o = epicode(&["gen-data", "--task", &p(d, "task.json"), "--out-dir", &p(d, "data")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.join("data/test.jsonl")).unwrap().lines().count(), 9);

    let train = |out: &str| {
        epicode(&[
            "train-toy",
            "--config",
            &p(d, "model.json"),
            "--data",
            &p(d, "data/train.jsonl"),
            "--epochs",
            "2",
            "--seed",
            "4",
            "--batch-size",
            "8",
            "--out-dir",
            &p(d, out),
        ])
    };
    let o = train("run");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(d.join("run/epoch1.safetensors").exists());
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss"));
    assert_eq!(log.lines().count(), 1 + 2 * 3);
    // Same seed, byte-identical checkpoints.
    train("run2");
    assert_eq!(fs::read(d.join("run/epoch2.safetensors")).unwrap(), fs::read(d.join("run2/epoch2.safetensors")).unwrap());

    let o = epicode(&[
        "evaluate",
        "--model",
        &p(d, "run/epoch2.safetensors"),
        "--model-config",
        &p(d, "model.json"),
        "--data",
        &p(d, "data/dev.jsonl"),
        "--out",
        &p(d, "eval.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(v["total"], 8);
    assert_eq!(fs::read_to_string(d.join("eval.jsonl")).unwrap().lines().count(), 8);

    let o = epicode(&[
        "decode",
        "--strong",
        &p(d, "run/epoch2.safetensors"),
        "--weak",
        &p(d, "run/epoch1.safetensors"),
        "--model-config",
        &p(d, "model.json"),
        "--lambda",
        "0.5",
        "--alpha",
        "0.1",
        "--max-new-tokens",
        "3",
        "--prompt-file",
        &p(d, "data/dev.jsonl"),
        "--out",
        &p(d, "dec.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(d.join("dec.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["output"].as_array().unwrap().len(), 3);
    assert_eq!(first["scores"].as_array().unwrap().len(), 3);

    let o = epicode(&[
        "sweep",
        "--early",
        &p(d, "run/epoch1.safetensors"),
        "--ft",
        &p(d, "run/epoch2.safetensors"),
        "--model-config",
        &p(d, "model.json"),
        "--grid",
        &p(d, "grid.json"),
        "--dev",
        &p(d, "data/dev.jsonl"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["mu_scores"].as_array().unwrap().len(), 2);
    assert_eq!(v["lambda_scores"].as_array().unwrap().len(), 1);
}

#[test]
fn pipeline_ablation_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = format!(
        r#"{{"task": {TINY_TASK}, "model": {TINY_MODEL}, "grid": {{"mu_values": [0.1, 0.4], "lambda_values": [0.2, 1.0]}}}}"#
    );
    fs::write(d.join("cfg.json"), cfg).unwrap();
    let o = epicode(&["ablation", "--config", &p(d, "cfg.json"), "--seeds", "2", "--out-dir", &p(d, "out"), "--log-level", "quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).is_empty());
    for f in ["runs.csv", "seeds.csv", "ablation.csv", "difficulty.csv", "summary.md", "config.json"] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("out/runs.csv")).unwrap().lines().count(), 1 + 2 * 4);

    let o = epicode(&["report", "--dir", &p(d, "out")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), fs::read_to_string(d.join("out/summary.md")).unwrap());

    // Rerunning the pipeline gives byte-identical CSVs.
    let o = epicode(&["ablation", "--config", &p(d, "cfg.json"), "--seeds", "2", "--out-dir", &p(d, "again"), "--threads", "1"]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["runs.csv", "seeds.csv", "ablation.csv"] {
        assert_eq!(fs::read(d.join("out").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pipeline_rejects_mismatched_vocab() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("task.json"), r#"{"vocab_size": 32}"#).unwrap();
    let o = epicode(&["pipeline", "--task", &p(dir.path(), "task.json"), "--seeds", "1", "--out-dir", &p(dir.path(), "o")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("vocab_size"));
}
