use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use anyhow::{bail, ensure, Context as _, Result};
use clap::{Parser, Subcommand};

use tabr::checkpoint::Checkpoint;
use tabr::config::{ModelKind, RunConfig};
use tabr::data::Dataset;
use tabr::evaluation::{compute_metric, ensemble_evaluate, to_predictions, RunResult};
use tabr::experiments::{self, Outcome, Summary};
use tabr::model::Model;
use tabr::tensor::Tensor;
use tabr::training::Prepared;

#[derive(Parser)]
#[command(name = "tabr", about = "Retrieval-augmented models for tabular data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run config file (key = value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    max_epochs: Option<usize>,
    /// Dataset name under the data root (CA is an alias for california).
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Independent seeds to run at once, each in its own process.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write config, checkpoint, log and summary.
    Train,
    /// Score a checkpoint on a dataset part.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        part: String,
    },
    /// Train several seeds and score ensembles of consecutive groups.
    EnsembleEval {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Train every ladder step over several seeds.
    AblationLadder {
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        steps: Vec<u8>,
    },
    /// Compare freezing contexts after N epochs with the unfrozen run.
    FreezeExperiment {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8")]
        freeze_epochs: Vec<usize>,
    },
    /// Train on a fraction of the training rows, then add the rest as candidates.
    AddCandidates {
        #[arg(long)]
        candidates_fraction: Option<f64>,
    },
    /// Entropy of the average attention distribution on the test part.
    AnalyzeEntropy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test metric with the label-embedding line removed from `T(k - k_i)`.
    AnalyzeValueProjection {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// The kNN baseline.
    Knn {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Finite-difference check of every primitive and of TabR-S.
    GradCheck,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Train => "train",
            Cmd::Evaluate { .. } => "evaluate",
            Cmd::EnsembleEval { .. } => "ensemble-eval",
            Cmd::AblationLadder { .. } => "ablation-ladder",
            Cmd::FreezeExperiment { .. } => "freeze-experiment",
            Cmd::AddCandidates { .. } => "add-candidates",
            Cmd::AnalyzeEntropy { .. } => "analyze-entropy",
            Cmd::AnalyzeValueProjection { .. } => "analyze-value-projection",
            Cmd::Knn { .. } => "knn",
            Cmd::GradCheck => "grad-check",
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set("train.seed", &s.to_string())?;
    }
    if let Some(e) = cli.max_epochs {
        cfg.set("train.max_epochs", &e.to_string())?;
    }
    if let Some(d) = &cli.dataset {
        cfg.set("data.name", d)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{}-{}-seed{}", cli.cmd.name(), cfg.data.name, cfg.train.seed))
    });
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn predictions_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

fn read_predictions(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse::<f64>().context("bad prediction value")).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(Tensor::from_rows(&rows)?)
}

/// Trains one model and writes its artifacts into `dir`.
fn train_run(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<(Prepared, Outcome, Summary)> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.cfg"), &cfg.to_text())?;
    let prep = experiments::prepare(ds, cfg)?;
    let out = experiments::fit(cfg, &prep)?;
    let summary = Summary::new(cfg, prep.task, &out);
    experiments::checkpoint(cfg, &prep, &out).write(&dir.join("model.ckpt"))?;
    write(&dir.join("train_log.csv"), &out.trained.log.to_csv())?;
    write(&dir.join("test_predictions.csv"), &predictions_csv(&out.test_preds))?;
    write(&dir.join("summary.json"), &summary.to_json())?;
    log::info!("{} seed {}: test {} {:.6}", cfg.kind.name(), cfg.train.seed, summary.metric, summary.test_metric);
    Ok((prep, out, summary))
}

/// Per-seed test metrics and predictions, one run directory per seed.
fn run_seeds(cfg: &RunConfig, ds: &Dataset, seeds: &[u64], dir: &Path, jobs: usize) -> Result<Vec<(f64, Tensor)>> {
    let seed_dir = |s: u64| dir.join(format!("seed-{s}"));
    let with_seed = |s: u64| -> Result<RunConfig> {
        let mut c = cfg.clone();
        c.set("train.seed", &s.to_string())?;
        Ok(c)
    };
    if jobs <= 1 {
        return seeds
            .iter()
            .map(|&s| {
                let (_, out, _) = train_run(&with_seed(s)?, ds, &seed_dir(s))?;
                Ok((out.test_metric, out.test_preds))
            })
            .collect();
    }
    let exe = std::env::current_exe().context("locating the executable")?;
    for chunk in seeds.chunks(jobs) {
        let mut children = Vec::new();
        for &s in chunk {
            let d = seed_dir(s);
            fs::create_dir_all(&d)?;
            let cfg_path = d.join("config.cfg");
            write(&cfg_path, &with_seed(s)?.to_text())?;
            let child = Command::new(&exe)
                .args(["train", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&d)
                .stdout(Stdio::null())
                .spawn()
                .context("starting a seed process")?;
            children.push((s, child));
        }
        for (s, mut child) in children {
            let status = child.wait()?;
            ensure!(status.success(), "seed {s} failed with {status}");
        }
    }
    seeds
        .iter()
        .map(|&s| {
            let d = seed_dir(s);
            let text = fs::read_to_string(d.join("summary.json"))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let metric = v["test_metric"].as_f64().context("summary without test_metric")?;
            Ok((metric, read_predictions(&d.join("test_predictions.csv"))?))
        })
        .collect()
}

const RESULTS_HEADER: &str = "algorithm,dataset,mean,std,per_seed\n";

fn trained_from(cli_checkpoint: &Option<PathBuf>, cfg: &RunConfig, dir: &Path) -> Result<(Prepared, Outcome)> {
    match cli_checkpoint {
        None => {
            let ds = experiments::load(cfg)?;
            let (prep, out, _) = train_run(cfg, &ds, dir)?;
            Ok((prep, out))
        }
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let ds = experiments::load(&ck.config)?;
            let prep = Prepared::new(&ds, &ck.config.data.policies(ds.p_num())?, &ck_train_ids(&ck, &ds)?)?;
            ensure!(prep.pp == ck.preprocessor, "the dataset does not reproduce the checkpoint's preprocessing");
            let model = ck.model()?;
            let store = match (&model, &ck.candidates) {
                (Model::Tabr(m), Some(c)) => Some(c.restore(m)?),
                (Model::Tabr(_), None) => bail!("checkpoint has no candidate store"),
                _ => None,
            };
            let test_preds = tabr::training::predict(&model, store.as_ref(), &prep, &prep.test)?;
            let test_metric = compute_metric(prep.task, &test_preds, &prep.targets_test)?;
            let trained = tabr::training::Trained {
                model,
                log: Default::default(),
                cache: ck.cache,
                store,
            };
            Ok((prep, Outcome { trained, test_preds, test_metric }))
        }
    }
}

fn ck_train_ids(ck: &Checkpoint, ds: &Dataset) -> Result<Vec<usize>> {
    Ok(experiments::train_rows(ds, ck.config.data.train_fraction, ck.config.train.seed)?)
}

fn run(cli: &Cli) -> Result<()> {
    if let Cmd::GradCheck = cli.cmd {
        let entries = experiments::gradient_suite(cli.seed.unwrap_or(0))?;
        let mut worst = 0.0f64;
        for e in &entries {
            println!("{:<24} {:>6} coords  max rel error {:.3e}", e.name, e.coords_checked, e.max_rel_error);
            worst = worst.max(e.max_rel_error);
        }
        println!("max relative error {worst:.3e}");
        ensure!(worst < 1e-4, "max relative error {worst:.3e} exceeds 1e-4");
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    let dir = out_dir(cli, &cfg)?;
    write(&dir.join("config.cfg"), &cfg.to_text())?;
    match &cli.cmd {
        Cmd::GradCheck => unreachable!("handled above"),
        Cmd::Train => {
            ensure!(cfg.kind != ModelKind::Knn, "knn has no training; use the knn subcommand");
            let ds = experiments::load(&cfg)?;
            let (_, _, summary) = train_run(&cfg, &ds, &dir)?;
            print!("{}", summary.to_json());
        }
        Cmd::Evaluate { checkpoint, part } => {
            let ck = Checkpoint::read(checkpoint)?;
            let ds = experiments::load(&ck.config)?;
            ensure!(
                ds.task == ck.meta.task && ds.p_num() == ck.meta.p_num,
                "dataset {} does not match the checkpoint's task or features",
                ck.config.data.name
            );
            let rows = match part.as_str() {
                "train" => &ds.splits.train,
                "val" => &ds.splits.val,
                "test" => &ds.splits.test,
                other => bail!("unknown part {other:?}"),
            };
            let feats = ck.preprocessor.transform(&ds, rows)?;
            let targets: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
            let model = ck.model()?;
            let raw = match &model {
                Model::Tabr(m) => {
                    let c = ck.candidates.as_ref().context("checkpoint has no candidate store")?;
                    let ids = (part == "train").then_some(rows.as_slice());
                    c.restore(m)?.predict(m, &feats, ids, None)?.0
                }
                Model::Mlp(m) => m.predict(&feats)?,
            };
            let preds = to_predictions(ck.meta.task, &raw, ck.preprocessor.target_scaler())?;
            let metric = compute_metric(ck.meta.task, &preds, &targets)?;
            println!("{part} {} {metric:.6}", experiments::metric_name(ck.meta.task));
        }
        Cmd::EnsembleEval { seeds } => {
            let ds = experiments::load(&cfg)?;
            let n = seeds.unwrap_or(cfg.eval.seeds);
            let seed_list: Vec<u64> = (0..n as u64).collect();
            let runs = run_seeds(&cfg, &ds, &seed_list, &dir, cli.jobs)?;
            let metrics: Vec<f64> = runs.iter().map(|r| r.0).collect();
            let preds: Vec<Tensor> = runs.into_iter().map(|r| r.1).collect();
            let targets: Vec<f64> = ds.splits.test.iter().map(|&i| ds.y[i]).collect();
            let ens = ensemble_evaluate(ds.task, &preds, cfg.eval.group_size, &targets)?;
            let single = RunResult {
                algorithm: cfg.kind.name().to_string(),
                dataset: cfg.data.name.clone(),
                metrics,
            };
            let ensemble = RunResult {
                algorithm: format!("{}-ensemble", cfg.kind.name()),
                dataset: cfg.data.name.clone(),
                metrics: vec![ens],
            };
            let csv = format!("{RESULTS_HEADER}{}\n{}\n", single.csv_row(), ensemble.csv_row());
            write(&dir.join("results.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::AblationLadder { seeds, steps } => {
            let ds = experiments::load(&cfg)?;
            let n = seeds.unwrap_or(cfg.eval.seeds);
            let seed_list: Vec<u64> = (0..n as u64).collect();
            let mut csv = String::from(RESULTS_HEADER);
            for &step in steps {
                let c = experiments::ladder_config(&cfg, step)?;
                let runs = run_seeds(&c, &ds, &seed_list, &dir.join(format!("step-{step}")), cli.jobs)?;
                let r = RunResult {
                    algorithm: format!("Step-{step}"),
                    dataset: cfg.data.name.clone(),
                    metrics: runs.iter().map(|r| r.0).collect(),
                };
                let _ = writeln!(csv, "{}", r.csv_row());
                write(&dir.join("results.csv"), &csv)?;
            }
            print!("{csv}");
        }
        Cmd::FreezeExperiment { freeze_epochs } => {
            ensure!(cfg.kind.is_tabr(), "context freezing needs a TabR model");
            let ds = experiments::load(&cfg)?;
            let mut base = cfg.clone();
            base.train.freeze_after = None;
            let (prep, reference, _) = train_run(&base, &ds, &dir.join("unfrozen"))?;
            let (rows, outcomes) = experiments::freeze_experiment(&base, &prep, &reference, freeze_epochs)?;
            for (n, out) in freeze_epochs.iter().zip(&outcomes) {
                let d = dir.join(format!("cf-{n}"));
                fs::create_dir_all(&d)?;
                write(&d.join("train_log.csv"), &out.trained.log.to_csv())?;
            }
            let mut csv = String::from("setting,test_metric,relative_time,relative_epoch_time,epochs_run\n");
            for r in &rows {
                let setting = r.freeze_after.map_or("unfrozen".to_string(), |n| format!("CF-{n}"));
                let ret = r.relative_epoch_time.map(|v| format!("{v:.4}")).unwrap_or_default();
                let _ = writeln!(csv, "{setting},{:.6},{:.4},{ret},{}", r.test_metric, r.relative_time, r.epochs_run);
            }
            write(&dir.join("results.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::AddCandidates { candidates_fraction } => {
            let mut c = cfg.clone();
            if let Some(f) = candidates_fraction {
                c.set("data.train_fraction", &f.to_string())?;
            }
            ensure!(c.data.train_fraction < 1.0, "set a training fraction below 1 to leave rows to add");
            let ds = experiments::load(&c)?;
            let (res, _) = experiments::online_candidates(&ds, &c)?;
            let json = serde_json::to_string_pretty(&res)? + "\n";
            write(&dir.join("summary.json"), &json)?;
            print!("{json}");
        }
        Cmd::AnalyzeEntropy { checkpoint } => {
            let (prep, out) = trained_from(checkpoint, &cfg, &dir)?;
            let res = experiments::entropy_analysis(&prep, &out)?;
            let json = serde_json::to_string_pretty(&res)? + "\n";
            write(&dir.join("entropy.json"), &json)?;
            print!("{json}");
        }
        Cmd::AnalyzeValueProjection { checkpoint } => {
            let (prep, out) = trained_from(checkpoint, &cfg, &dir)?;
            let res = experiments::value_projection_analysis(&prep, &out, cfg.train.seed)?;
            let json = serde_json::to_string_pretty(&res)? + "\n";
            write(&dir.join("value_projection.json"), &json)?;
            print!("{json}");
        }
        Cmd::Knn { k } => {
            let ds = experiments::load(&cfg)?;
            let prep = experiments::prepare(&ds, &cfg)?;
            let k = k.unwrap_or(cfg.knn_k);
            let (preds, metric) = experiments::knn(&ds, &prep, k)?;
            write(&dir.join("test_predictions.csv"), &predictions_csv(&preds))?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "model": "knn",
                "dataset": cfg.data.name,
                "k": k,
                "metric": experiments::metric_name(ds.task),
                "test_metric": metric,
            }))? + "\n";
            write(&dir.join("summary.json"), &json)?;
            print!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
