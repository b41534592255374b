use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tabr::config::RunConfig;
use tabr::data::{synthetic, Dataset};

fn write_dataset(dir: &Path, ds: &Dataset) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("meta.txt"), format!("task=regression\nn={}\n", ds.n())).unwrap();
    let mut x = String::new();
    for r in 0..ds.n() {
        let row: Vec<String> = ds.x_num.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(x, "{}", row.join(","));
    }
    fs::write(dir.join("X_num.csv"), x).unwrap();
    let y: String = ds.y.iter().map(|v| format!("{v}\n")).collect();
    fs::write(dir.join("Y.csv"), y).unwrap();
    for (name, rows) in [
        ("idx_train.txt", &ds.splits.train),
        ("idx_val.txt", &ds.splits.val),
        ("idx_test.txt", &ds.splits.test),
    ] {
        let s: String = rows.iter().map(|i| format!("{i}\n")).collect();
        fs::write(dir.join(name), s).unwrap();
    }
}

struct Env {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn setup() -> Env {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    write_dataset(&root.join("data").join("toy"), &synthetic::regression(150, 3, 7));
    let config = root.join("small.cfg");
    fs::write(
        &config,
        "model.kind = tabr-s\nmodel.d = 8\nmodel.retrieval.m = 4\ndata.name = toy\n\
         train.batch_size = 16\ntrain.max_epochs = 3\ntrain.patience = 2\neval.group_size = 2\n",
    )
    .unwrap();
    Env { _tmp: tmp, root, config }
}

fn tabr(env: &Env, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabr"))
        .args(args)
        .env("TABR_DATA_DIR", env.root.join("data"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn train_writes_artifacts_and_evaluate_reproduces_the_metric() {
    let env = setup();
    let run = env.root.join("run");
    let cfg = env.config.to_str().unwrap();
    ok(&tabr(&env, &["train", "--config", cfg, "--seed", "3", "--out", run.to_str().unwrap()]));
    for f in ["config.cfg", "model.ckpt", "model.ckpt.manifest.json", "train_log.csv", "summary.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let echoed = RunConfig::parse(&fs::read_to_string(run.join("config.cfg")).unwrap()).unwrap();
    assert_eq!(echoed.train.seed, 3);
    assert_eq!(echoed.tabr.d, 8);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    let metric = summary["test_metric"].as_f64().unwrap();
    assert!(metric.is_finite());
    assert!(!fs::read_to_string(run.join("summary.json")).unwrap().contains("seconds"));

    let ck = run.join("model.ckpt");
    let out = ok(&tabr(&env, &["evaluate", "--checkpoint", ck.to_str().unwrap(), "--out", env.root.join("ev").to_str().unwrap()]));
    let reported: f64 = out.split_whitespace().last().unwrap().parse().unwrap();
    assert!((reported - metric).abs() < 1e-6, "{out}");

    // rerun from the echoed config gives the same summary bytes
    let again = env.root.join("again");
    let echoed_path = run.join("config.cfg");
    ok(&tabr(&env, &["train", "--config", echoed_path.to_str().unwrap(), "--out", again.to_str().unwrap()]));
    assert_eq!(
        fs::read(run.join("summary.json")).unwrap(),
        fs::read(again.join("summary.json")).unwrap()
    );
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let env = setup();
    let bad = env.root.join("bad.cfg");
    fs::write(&bad, "model.colour = red\n").unwrap();
    for args in [
        vec!["train", "--config", bad.to_str().unwrap()],
        vec!["train", "--dataset", "absent", "--out", env.root.join("x").to_str().unwrap()],
        vec!["evaluate", "--checkpoint", env.root.join("none.ckpt").to_str().unwrap(), "--out", env.root.join("y").to_str().unwrap()],
    ] {
        let out = tabr(&env, &args);
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "));
    }
}

#[test]
fn ladder_knn_and_candidates_subcommands() {
    let env = setup();
    let cfg = env.config.to_str().unwrap();
    let out_dir = env.root.join("ladder");
    let csv = ok(&tabr(
        &env,
        &["ablation-ladder", "--config", cfg, "--seeds", "2", "--steps", "0,4", "--max-epochs", "1", "--out", out_dir.to_str().unwrap()],
    ));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("Step-0,toy,") && lines[2].starts_with("Step-4,toy,"));
    assert_eq!(lines[1].split(',').nth(4).unwrap().split(';').count(), 2);

    let knn = ok(&tabr(&env, &["knn", "--config", cfg, "--k", "5", "--out", env.root.join("knn").to_str().unwrap()]));
    assert!(knn.contains("\"k\": 5"));

    let grown = ok(&tabr(
        &env,
        &["add-candidates", "--config", cfg, "--candidates-fraction", "0.5", "--out", env.root.join("grow").to_str().unwrap()],
    ));
    let v: serde_json::Value = serde_json::from_str(&grown).unwrap();
    assert_eq!(v["final_candidates"].as_u64().unwrap(), 90);
    assert_eq!(v["initial_candidates"].as_u64().unwrap(), 45);
}

#[test]
fn parallel_seeds_match_sequential_seeds() {
    let env = setup();
    let cfg = env.config.to_str().unwrap();
    let a = ok(&tabr(&env, &["ensemble-eval", "--config", cfg, "--seeds", "2", "--out", env.root.join("a").to_str().unwrap()]));
    let b = ok(&tabr(
        &env,
        &["ensemble-eval", "--config", cfg, "--seeds", "2", "--jobs", "2", "--out", env.root.join("b").to_str().unwrap()],
    ));
    assert_eq!(a, b);
}

#[test]
fn grad_check_subcommand_passes() {
    let env = setup();
    let out = ok(&tabr(&env, &["grad-check"]));
    assert!(out.contains("max relative error"));
}

#[test]
fn bundled_presets_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::parse(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg, "{}", path.display());
        n += 1;
    }
    assert!(n >= 8);
}
