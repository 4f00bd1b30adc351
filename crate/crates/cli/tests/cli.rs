use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {
    "num_classes": 6,
    "dim": 8,
    "train_per_class": 60,
    "test_per_class": 20,
    "separation": 5.0,
    "partition": { "type": "quantity", "labels_per_client": 2 },
    "anchor_labels": 2,
    "anchor_disjoint": true
  },
  "model": { "expert_hidden": [8], "common_target_acc": 0.8 },
  "federation": {
    "rounds": 4,
    "num_clients": 12,
    "num_test_clients": 3,
    "num_experts": 3,
    "top_k": 2,
    "anchors_per_round": 3,
    "normals_per_round": 3
  },
  "training": { "method": "fedjets", "seed": 3, "batch_size": 8, "local_iterations": 2 },
  "eval": { "interval": 2, "last_k": 2 }
}
"#;

fn fedjets(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedjets")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> String {
        self.path("tiny.json").display().to_string()
    }

    fn run(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let cfg = self.config();
        let mut args = vec!["run", "--config", &cfg, "--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = fedjets(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn run_writes_the_output_layout() {
    let ws = Workspace::new();
    let dir = ws.run("out", &[]);
    for f in ["config.echo.json", "metrics.jsonl", "metrics.csv", "state.ckpt", "comm.csv"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(read(&dir.join("metrics.jsonl")).lines().count(), 2);
    // Header, the one-off setup row, then one row per round.
    assert_eq!(read(&dir.join("comm.csv")).lines().count(), 6);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let ws = Workspace::new();
    let first = ws.run("a", &["--set", "training.lr=0.02"]);
    let echo = first.join("config.echo.json");
    let second = ws.path("b");
    let o = fedjets(&["run", "--config", echo.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(&first.join("metrics.jsonl")), read(&second.join("metrics.jsonl")));
    assert_eq!(read(&echo), read(&second.join("config.echo.json")));
}

#[test]
fn thread_count_does_not_change_results() {
    let ws = Workspace::new();
    let a = ws.run("a", &[]);
    let b = ws.run("b", &["--threads", "1"]);
    assert_eq!(read(&a.join("metrics.jsonl")), read(&b.join("metrics.jsonl")));
}

#[test]
fn seed_flag_overrides_the_file() {
    let ws = Workspace::new();
    let a = ws.run("a", &["--seed", "11"]);
    let b = ws.run("b", &["--set", "training.seed=11"]);
    assert_eq!(read(&a.join("metrics.jsonl")), read(&b.join("metrics.jsonl")));
    assert!(read(&a.join("metrics.jsonl")).contains("\"seed\":11"));
}

#[test]
fn missing_config_is_an_io_error() {
    let o = fedjets(&["run", "--config", "/nonexistent/cfg.json", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn malformed_and_invalid_configs_exit_2() {
    let ws = Workspace::new();
    let bad = ws.path("bad.json");
    std::fs::write(&bad, "{ \"data\": ").unwrap();
    let o = fedjets(&["run", "--config", bad.to_str().unwrap(), "--out", ws.path("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let cfg = ws.config();
    let out = ws.path("y");
    for set in ["federation.top_k=9", "data.bogus_key=1", "training.lr=-1"] {
        let o = fedjets(&["run", "--config", &cfg, "--set", set, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{set}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error: "));
    }
}

#[test]
fn pretrain_stops_at_chance_target_and_fails_on_unreachable_one() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let ckpt = ws.path("common.ckpt");
    // An untrained net sits near chance; a target at its (printed, rounded)
    // accuracy needs no steps.
    let o = fedjets(&["pretrain", "--config", &cfg, "--epochs", "0", "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    let start: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!((start - 1.0 / 6.0).abs() < 0.15, "{line}");
    let target = format!("{}", start - 1e-4);
    let o = fedjets(&["pretrain", "--config", &cfg, "--target-acc", &target, "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("epochs 0 steps 0"));
    assert!(ckpt.is_file());

    let o = fedjets(&[
        "pretrain", "--config", &cfg, "--set", "data.separation=0.5", "--target-acc", "1.0", "--epochs", "1", "--out",
        ws.path("never.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = fedjets(&["pretrain", "--config", &cfg, "--target-acc", "1.5", "--out", ws.path("z.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pretrained_checkpoint_feeds_a_run() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let ckpt = ws.path("common.ckpt");
    let o = fedjets(&["pretrain", "--config", &cfg, "--epochs", "3", "--out", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let set = format!("model.common_checkpoint={}", ckpt.display());
    let dir = ws.run("run", &["--set", &set]);
    assert!(dir.join("state.ckpt").is_file());

    let missing = ws.path("absent.ckpt");
    let set = format!("model.common_checkpoint={}", missing.display());
    let o = fedjets(&["run", "--config", &cfg, "--set", &set, "--out", ws.path("x").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn eval_reports_zero_shot_and_routing() {
    let ws = Workspace::new();
    let dir = ws.run("run", &[]);
    let cfg = ws.config();
    let report = ws.path("report.json");
    let csv = ws.path("routing.csv");
    let o = fedjets(&[
        "eval",
        "--config",
        &cfg,
        "--state",
        dir.join("state.ckpt").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--routing-csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&read(&report)).unwrap();
    assert_eq!(json["method"], "fedjets");
    assert_eq!(json["zero_shot"]["client_acc"].as_array().unwrap().len(), 3);
    let z = json["zero_shot"]["average"].as_f64().unwrap();
    assert!((z - json["global_acc"].as_f64().unwrap()).abs() < 1e-12);
    assert!((json["routing"]["chance_error"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);

    // The saved state evaluates to the final logged accuracy.
    let last = read(&dir.join("metrics.jsonl")).lines().last().unwrap().to_string();
    let logged: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert!((logged["global_acc"].as_f64().unwrap() - z).abs() < 1e-6);

    let table = read(&csv);
    assert!(table.starts_with("client,incorrect,correct,error_rate\n"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn corrupt_state_is_rejected() {
    let ws = Workspace::new();
    let state = ws.path("junk.ckpt");
    std::fs::write(&state, b"not a checkpoint").unwrap();
    let cfg = ws.config();
    let o = fedjets(&[
        "eval",
        "--config",
        &cfg,
        "--state",
        state.to_str().unwrap(),
        "--report",
        ws.path("r.json").to_str().unwrap(),
    ]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn report_is_deterministic_and_tabulates_each_run() {
    let ws = Workspace::new();
    let a = ws.run("a", &[]);
    let b = ws.run("b", &["--set", "training.method=fedavg"]);
    let files = [a.join("metrics.jsonl"), b.join("metrics.jsonl")];
    let args: Vec<&str> = ["report", "--last-k", "2"]
        .into_iter()
        .chain(files.iter().map(|f| f.to_str().unwrap()))
        .collect();
    let first = fedjets(&args);
    let second = fedjets(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().next().unwrap().contains("best_last_2"));
    assert!(text.contains(",fedjets,") && text.contains(",fedavg,"));

    let o = fedjets(&["report", ws.path("missing.jsonl").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn partition_inspect_lists_every_client() {
    let ws = Workspace::new();
    let cfg = ws.config();
    let out = ws.path("hist.csv");
    let o = fedjets(&["partition", "--config", &cfg, "--inspect", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = read(&out);
    assert!(text.starts_with("client_id,kind,label,count\n"));
    let anchors = text.lines().filter(|l| l.contains(",anchor,")).count();
    let normals = text.lines().filter(|l| l.contains(",normal,")).count();
    assert_eq!(anchors, 3 * 2);
    assert_eq!(normals, 9 * 2);
    assert!(text.lines().any(|l| l.contains(",test,")));
}
