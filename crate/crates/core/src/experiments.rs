//! End-to-end runs: load and prepare a dataset, train a configured model,
//! and the multi-run experiments built from that (ablation ladder, context
//! freeze, online candidate growth and the two attention analyses).

use rand::seq::index::sample;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::candidates::CandidateStore;
use crate::checkpoint::{Checkpoint, Meta, StoredCandidates};
use crate::config::{ModelKind, RunConfig};
use crate::data::{load_dataset, synthetic, Dataset, NumPolicy, Preprocessor, Task};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_direction, attention_entropy, compute_metric, knn_predict, to_predictions, value_projection_ablation,
    Subspace,
};
use crate::model::{parameter_version, Context, Model, Tabr, TabrConfig};
use crate::rng::stream;
use crate::tensor::{grad_check, primitive_loss, GradCheckOptions, Tensor, PRIMITIVES};
use crate::training::{predict, task_loss, train, Prepared, Trained};

pub fn metric_name(task: Task) -> &'static str {
    if task.is_regression() {
        "rmse"
    } else {
        "accuracy"
    }
}

pub fn load(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(cfg.data.resolve_dir()?)
}

/// Training-split rows kept under `fraction`: a seeded sample, in split
/// order. A fraction of 1 keeps the whole split.
pub fn train_rows(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let all = &ds.splits.train;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {fraction} is outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(all.clone());
    }
    let k = ((all.len() as f64 * fraction).round() as usize).max(1);
    let mut pos = sample(&mut stream(seed, "train_subset", &[]), all.len(), k).into_vec();
    pos.sort_unstable();
    Ok(pos.into_iter().map(|p| all[p]).collect())
}

/// Preprocessing fitted on the configured training rows.
pub fn prepare(ds: &Dataset, cfg: &RunConfig) -> Result<Prepared> {
    let rows = train_rows(ds, cfg.data.train_fraction, cfg.train.seed)?;
    Prepared::new(ds, &cfg.data.policies(ds.p_num())?, &rows)
}

pub struct Outcome {
    pub trained: Trained,
    /// Target-space test predictions.
    pub test_preds: Tensor,
    pub test_metric: f64,
}

/// Trains the configured TabR or MLP with seed `cfg.train.seed`.
pub fn fit(cfg: &RunConfig, prep: &Prepared) -> Result<Outcome> {
    cfg.validate()?;
    let model = cfg.build_model(prep.task, prep.p_num(), prep.p_other(), cfg.train.seed)?;
    let trained = train(model, prep, &cfg.train)?;
    let test_preds = predict(&trained.model, trained.store.as_ref(), prep, &prep.test)?;
    let test_metric = compute_metric(prep.task, &test_preds, &prep.targets_test)?;
    Ok(Outcome {
        trained,
        test_preds,
        test_metric,
    })
}

/// Raw targets of the prepared training rows.
fn train_targets(ds: &Dataset, prep: &Prepared) -> Vec<f64> {
    prep.train_ids.iter().map(|&i| ds.y[i]).collect()
}

/// kNN test predictions and metric on the prepared features.
pub fn knn(ds: &Dataset, prep: &Prepared, k: usize) -> Result<(Tensor, f64)> {
    let preds = knn_predict(prep.task, &prep.train, &train_targets(ds, prep), &prep.test, k)?;
    let metric = compute_metric(prep.task, &preds, &prep.targets_test)?;
    Ok((preds, metric))
}

/// What a run reports. Contains no wall-clock values, so reruns with the
/// same config produce the same bytes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    pub metric: String,
    pub test_metric: f64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub parameter_version: String,
    pub train_log_sha256: String,
    pub test_predictions_sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_hash(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

impl Summary {
    pub fn new(cfg: &RunConfig, task: Task, out: &Outcome) -> Self {
        let log = &out.trained.log;
        Summary {
            model: cfg.kind.name().to_string(),
            dataset: cfg.data.name.clone(),
            seed: cfg.train.seed,
            metric: metric_name(task).to_string(),
            test_metric: out.test_metric,
            best_epoch: log.best_epoch,
            best_val: log.best_val,
            epochs_run: log.epochs.len(),
            parameter_version: parameter_version(out.trained.model.params()),
            train_log_sha256: sha256_hex(log.deterministic_csv().as_bytes()),
            test_predictions_sha256: tensor_hash(&out.test_preds),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }
}

/// A checkpoint of a finished run.
pub fn checkpoint(cfg: &RunConfig, prep: &Prepared, out: &Outcome) -> Checkpoint {
    let t = &out.trained;
    Checkpoint {
        config: cfg.clone(),
        meta: Meta {
            task: prep.task,
            p_num: prep.p_num(),
            p_other: prep.p_other(),
            parameter_version: parameter_version(t.model.params()),
            best_epoch: t.log.best_epoch,
            best_val: t.log.best_val,
        },
        params: t.model.params().clone(),
        preprocessor: prep.pp.clone(),
        candidates: t.store.as_ref().map(StoredCandidates::from_store),
        cache: t.cache.clone(),
    }
}

/// The config of ladder step `step` on top of `base`.
pub fn ladder_config(base: &RunConfig, step: u8) -> Result<RunConfig> {
    let mut cfg = base.clone();
    if cfg.kind == ModelKind::TabrS || !cfg.kind.is_tabr() {
        cfg.kind = ModelKind::Tabr;
    }
    cfg.set("model.retrieval.step", &step.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FreezeRow {
    /// `None` for the unfrozen reference.
    pub freeze_after: Option<usize>,
    pub test_metric: f64,
    /// Optimization time of the run over that of the reference run.
    pub relative_time: f64,
    /// Mean epoch time after freezing over the reference's mean epoch time.
    pub relative_epoch_time: Option<f64>,
    pub epochs_run: usize,
}

/// The reference row plus one row per freeze setting, sharing the seed of
/// `base`.
pub fn freeze_experiment(
    base: &RunConfig,
    prep: &Prepared,
    reference: &Outcome,
    freeze_epochs: &[usize],
) -> Result<(Vec<FreezeRow>, Vec<Outcome>)> {
    let log = &reference.trained.log;
    let ref_total: f64 = log.epochs.iter().map(|e| e.seconds).sum();
    let ref_epoch = log.mean_seconds(|_| true).unwrap_or(f64::NAN);
    let mut rows = vec![FreezeRow {
        freeze_after: None,
        test_metric: reference.test_metric,
        relative_time: 1.0,
        relative_epoch_time: None,
        epochs_run: log.epochs.len(),
    }];
    let mut outcomes = Vec::new();
    for &n in freeze_epochs {
        let mut cfg = base.clone();
        cfg.train.freeze_after = Some(n);
        let out = fit(&cfg, prep)?;
        let l = &out.trained.log;
        let total: f64 = l.epochs.iter().map(|e| e.seconds).sum();
        rows.push(FreezeRow {
            freeze_after: Some(n),
            test_metric: out.test_metric,
            relative_time: total / ref_total,
            relative_epoch_time: l.mean_seconds(|e| e.frozen).map(|s| s / ref_epoch),
            epochs_run: l.epochs.len(),
        });
        outcomes.push(out);
    }
    Ok((rows, outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OnlineResult {
    pub initial_candidates: usize,
    pub final_candidates: usize,
    pub metric_initial: f64,
    pub metric_grown: f64,
}

/// Trains on the configured training fraction, then adds the remaining
/// training rows to the candidate store of the trained model without
/// retraining and reports the test metric before and after.
pub fn online_candidates(ds: &Dataset, cfg: &RunConfig) -> Result<(OnlineResult, Outcome)> {
    if !cfg.kind.is_tabr() {
        return Err(Error::Unsupported("candidate growth needs a TabR model".into()));
    }
    let prep = prepare(ds, cfg)?;
    let out = fit(cfg, &prep)?;
    let Model::Tabr(m) = &out.trained.model else {
        unreachable!("TabR config builds a TabR model")
    };
    let mut store = out.trained.store.clone().expect("TabR training returns a store");
    let initial = store.len();
    let kept: std::collections::HashSet<usize> = prep.train_ids.iter().copied().collect();
    let rest: Vec<usize> = ds.splits.train.iter().copied().filter(|i| !kept.contains(i)).collect();
    store.add_candidates(m, prep.pp.transform(ds, &rest)?, prep.pp.labels(ds, &rest), rest)?;
    let (raw, _) = store.predict(m, &prep.test, None, None)?;
    let preds = to_predictions(prep.task, &raw, prep.pp.target_scaler())?;
    let result = OnlineResult {
        initial_candidates: initial,
        final_candidates: store.len(),
        metric_initial: out.test_metric,
        metric_grown: compute_metric(prep.task, &preds, &prep.targets_test)?,
    };
    Ok((result, out))
}

fn tabr_parts(out: &Outcome) -> Result<(&Tabr, &CandidateStore)> {
    match (&out.trained.model, &out.trained.store) {
        (Model::Tabr(m), Some(s)) => Ok((m, s)),
        _ => Err(Error::Unsupported("the analysis needs a trained TabR model".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyResult {
    pub entropy: f64,
    /// Entropy of the uniform distribution over the candidates.
    pub uniform: f64,
    pub n_candidates: usize,
}

/// Entropy of the average test-set attention distribution.
pub fn entropy_analysis(prep: &Prepared, out: &Outcome) -> Result<EntropyResult> {
    let (m, store) = tabr_parts(out)?;
    let (_, records) = store.predict(m, &prep.test, None, None)?;
    let n = store.len();
    Ok(EntropyResult {
        entropy: attention_entropy(&records, n),
        uniform: (n as f64).ln(),
        n_candidates: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionResult {
    pub baseline: f64,
    pub without_label_line: f64,
    pub without_random: f64,
}

/// Test metric with the label-embedding line, or a random line, removed
/// from the key-difference term of the value module.
pub fn value_projection_analysis(prep: &Prepared, out: &Outcome, seed: u64) -> Result<ProjectionResult> {
    let (m, store) = tabr_parts(out)?;
    let scaler = prep
        .pp
        .target_scaler()
        .ok_or_else(|| Error::Unsupported("value projection ablation is defined for regression".into()))?;
    let run = |s: Subspace| -> Result<f64> {
        let dir = ablation_direction(m, s)?;
        value_projection_ablation(m, store, &prep.test, &prep.targets_test, scaler, &dir)
    };
    Ok(ProjectionResult {
        baseline: out.test_metric,
        without_label_line: run(Subspace::LabelLine)?,
        without_random: run(Subspace::Random(seed))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Finite-difference checks of every graph primitive and of the TabR-S
/// forward pass plus loss on a 32-row synthetic regression problem. Dropout
/// is off and `m` is 16 so the context fits; everything else is TabR-S.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    for (kind, name) in PRIMITIVES.iter().enumerate() {
        let (store, f) = primitive_loss(kind, seed);
        let r = grad_check(&store, f, &GradCheckOptions::default())?;
        out.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            coords_checked: r.coords_checked,
        });
    }
    let ds = synthetic::regression(32, 4, seed);
    let all: Vec<usize> = (0..32).collect();
    let pp = Preprocessor::fit_rows(&ds, &all, &[NumPolicy::Quantile; 4])?;
    let feats = pp.transform(&ds, &all)?;
    let labels = pp.labels(&ds, &all);
    let mut cfg = TabrConfig::tabr_s();
    cfg.dropout = 0.0;
    cfg.retrieval.attention_dropout = 0.0;
    cfg.retrieval.m = 16;
    let model = Tabr::new(cfg, ds.task, 4, 0, seed)?;
    let batch: Vec<usize> = (0..8).collect();
    let targets = feats.select(&batch);
    let exclude: Vec<Option<usize>> = batch.iter().map(|&i| Some(i)).collect();
    let y = labels[..8].to_vec();
    let r = grad_check(
        &model.params,
        |g, s| {
            let mut m = model.clone();
            m.params = s.clone();
            let ctx = Context::Search {
                candidates: &feats,
                labels: &labels,
                exclude: &exclude,
            };
            let o = m.forward(g, &targets, ctx)?;
            task_loss(g, m.task, o.logits, &y)
        },
        &GradCheckOptions {
            max_coords_per_param: Some(24),
            seed,
            ..GradCheckOptions::default()
        },
    )?;
    out.push(GradCheckEntry {
        name: "tabr-s forward + loss".into(),
        max_rel_error: r.max_rel_error,
        coords_checked: r.coords_checked,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::parse(
            "model.kind = tabr\nmodel.d = 8\nmodel.retrieval.m = 4\ntrain.batch_size = 16\ntrain.max_epochs = 2\ntrain.patience = 2",
        )
        .unwrap();
        cfg.train.track_delta_context = false;
        cfg
    }

    #[test]
    fn gradient_suite_passes() {
        let t = std::time::Instant::now();
        let entries = gradient_suite(0).unwrap();
        assert_eq!(entries.len(), PRIMITIVES.len() + 1);
        for e in &entries {
            assert!(e.max_rel_error < 1e-4, "{e:?}");
            assert!(e.coords_checked > 0);
        }
        assert!(t.elapsed().as_secs() < 60);
    }

    #[test]
    fn train_rows_subset_is_seeded_and_ordered() {
        let ds = synthetic::regression(100, 2, 1);
        let a = train_rows(&ds, 0.25, 3).unwrap();
        assert_eq!(a, train_rows(&ds, 0.25, 3).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|i| ds.splits.train.contains(i)));
        assert_eq!(a.len(), (ds.splits.train.len() as f64 * 0.25).round() as usize);
        assert_eq!(train_rows(&ds, 1.0, 3).unwrap(), ds.splits.train);
        assert!(train_rows(&ds, 0.0, 3).is_err());
    }

    #[test]
    fn summary_is_reproducible() {
        let ds = synthetic::regression(120, 3, 2);
        let cfg = small_cfg();
        let prep = prepare(&ds, &cfg).unwrap();
        let a = Summary::new(&cfg, ds.task, &fit(&cfg, &prep).unwrap()).to_json();
        let b = Summary::new(&cfg, ds.task, &fit(&cfg, &prep).unwrap()).to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn grown_store_with_everything_equals_full_rebuild() {
        let ds = synthetic::regression(150, 3, 4);
        let mut cfg = small_cfg();
        cfg.data.train_fraction = 0.5;
        let (res, out) = online_candidates(&ds, &cfg).unwrap();
        assert_eq!(res.final_candidates, ds.splits.train.len());
        assert!(res.initial_candidates < res.final_candidates);
        assert!(res.metric_grown.is_finite());
        let Model::Tabr(m) = &out.trained.model else { panic!() };
        let prep = prepare(&ds, &cfg).unwrap();
        let all = &ds.splits.train;
        let full = CandidateStore::build(m, prep.pp.transform(&ds, all).unwrap(), prep.pp.labels(&ds, all), all.clone())
            .unwrap();
        let (raw, _) = full.predict(m, &prep.test, None, None).unwrap();
        let preds = to_predictions(ds.task, &raw, prep.pp.target_scaler()).unwrap();
        let rebuilt = compute_metric(ds.task, &preds, &prep.targets_test).unwrap();
        assert!((rebuilt - res.metric_grown).abs() < 1e-9);
    }

    #[test]
    fn analyses_run_on_a_small_model() {
        let ds = synthetic::regression(120, 3, 5);
        let cfg = small_cfg();
        let prep = prepare(&ds, &cfg).unwrap();
        let out = fit(&cfg, &prep).unwrap();
        let e = entropy_analysis(&prep, &out).unwrap();
        assert!(e.entropy >= 0.0 && e.entropy <= ((e.n_candidates + 1) as f64).ln() + 1e-12);
        let p = value_projection_analysis(&prep, &out, 0).unwrap();
        assert_eq!(p.baseline, out.test_metric);
        assert!(p.without_label_line.is_finite() && p.without_random.is_finite());
        let (rows, _) = freeze_experiment(&cfg, &prep, &out, &[0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].relative_epoch_time.is_some());
        let (_, knn_metric) = knn(&ds, &prep, 3).unwrap();
        assert!(knn_metric.is_finite());
    }
}
