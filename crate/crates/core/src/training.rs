//! The training loop: AdamW, early stopping on the validation metric,
//! optional context freezing, and Δ-context tracking between epochs.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::candidates::CandidateStore;
use crate::data::{make_batches, Dataset, Features, NumPolicy, Preprocessor, Task};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metric, to_predictions, Direction};
use crate::model::{Context, ContextRecord, Model, Tabr};
use crate::retrieval::ContextCache;
use crate::rng::stream;
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};

/// A dataset with the preprocessor fitted on its training rows and every
/// part transformed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: Task,
    pub pp: Preprocessor,
    /// Dataset ids of the training rows, in candidate order.
    pub train_ids: Vec<usize>,
    pub train: Features,
    pub val: Features,
    pub test: Features,
    /// Training-space labels of the training rows.
    pub y_train: Vec<f64>,
    /// Raw targets (values or class ids).
    pub targets_val: Vec<f64>,
    pub targets_test: Vec<f64>,
}

impl Prepared {
    /// Fits on `train_ids` (normally the training split).
    pub fn new(ds: &Dataset, policies: &[NumPolicy], train_ids: &[usize]) -> Result<Self> {
        let pp = Preprocessor::fit_rows(ds, train_ids, policies)?;
        let (val, test) = (&ds.splits.val, &ds.splits.test);
        Ok(Prepared {
            task: ds.task,
            train_ids: train_ids.to_vec(),
            train: pp.transform(ds, train_ids)?,
            val: pp.transform(ds, val)?,
            test: pp.transform(ds, test)?,
            y_train: pp.labels(ds, train_ids),
            targets_val: val.iter().map(|&i| ds.y[i]).collect(),
            targets_test: test.iter().map(|&i| ds.y[i]).collect(),
            pp,
        })
    }

    pub fn p_num(&self) -> usize {
        self.train.num.cols()
    }

    pub fn p_other(&self) -> usize {
        self.train.other.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    /// `None` trains until early stopping.
    pub max_epochs: Option<usize>,
    pub seed: u64,
    /// Freeze contexts after this many epochs.
    pub freeze_after: Option<usize>,
    /// Record contexts of the training objects after every epoch.
    pub track_delta_context: bool,
    /// Scan at most this many random candidates per training step.
    pub candidate_cap: Option<usize>,
}

impl TrainConfig {
    pub fn tabr_s(batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            lr: 0.0003121273641315169,
            weight_decay: 0.0000012260352006404615,
            patience: 16,
            max_epochs: None,
            seed,
            freeze_after: None,
            track_delta_context: true,
            candidate_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.candidate_cap == Some(0) {
            return Err(Error::Config("candidate cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    NewBest,
    Continue,
    Stop,
}

/// Stops after `patience + 1` consecutive epochs without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    direction: Direction,
    patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(direction: Direction, patience: usize) -> Self {
        EarlyStopping {
            direction,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn update(&mut self, metric: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(b) => self.direction.better(metric, b),
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
            return StopDecision::NewBest;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

/// Attention mass that moved to new or more-attended candidates between two
/// records of the same object: the mass on candidates absent before, plus
/// the growth of the mass on the common ones.
pub fn delta_context(prev: &ContextRecord, cur: &ContextRecord) -> Result<f64> {
    if prev.indices.len() != cur.indices.len() || prev.weights.len() != prev.indices.len() {
        return Err(Error::shape(
            "delta_context",
            format!("supports of {} and {} candidates", prev.indices.len(), cur.indices.len()),
        ));
    }
    let mut novel = 0.0;
    let (mut common_cur, mut common_prev) = (0.0, 0.0);
    for (i, &b) in cur.indices.iter().zip(&cur.weights) {
        match prev.indices.iter().position(|p| p == i) {
            Some(j) => {
                common_cur += b;
                common_prev += prev.weights[j];
            }
            None => novel += b,
        }
    }
    Ok(novel + (common_cur - common_prev).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    /// Mean over training objects against the previous epoch; `None` when
    /// not tracked and on the first epoch.
    pub delta_context: Option<f64>,
    /// Wall time of the optimization steps of this epoch.
    pub seconds: f64,
    pub candidate_encodings: u64,
    pub similarity_evals: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// The log without wall-clock columns; identical across reruns.
    pub fn deterministic_csv(&self) -> String {
        self.csv(false)
    }

    fn csv(&self, timing: bool) -> String {
        let mut s = String::from("epoch,train_loss,val_metric,delta_context_mean,");
        if timing {
            s.push_str("seconds,");
        }
        s.push_str("candidate_encodings,similarity_evals,frozen\n");
        for e in &self.epochs {
            let dc = e.delta_context.map(|v| format!("{v:.10}")).unwrap_or_default();
            let _ = write!(s, "{},{:.10},{:.10},{},", e.epoch, e.train_loss, e.val_metric, dc);
            if timing {
                let _ = write!(s, "{:.3},", e.seconds);
            }
            let _ = writeln!(s, "{},{},{}", e.candidate_encodings, e.similarity_evals, e.frozen);
        }
        s
    }

    /// Mean seconds per epoch over `epochs` selected by `keep`.
    pub fn mean_seconds(&self, keep: impl Fn(&EpochLog) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.epochs.iter().filter(|e| keep(e)).map(|e| e.seconds).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Parameters excluded from weight decay: biases, LayerNorm parameters,
/// the label encoder and numeric embeddings.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gain")
        || name.starts_with("retrieval.w_y")
        || name.starts_with("num_embedding"))
}

pub fn task_loss(g: &mut Graph, task: Task, logits: Var, labels: &[f64]) -> Result<Var> {
    match task {
        Task::Regression => g.mse(logits, labels),
        Task::Binclass => g.binary_cross_entropy(logits, labels),
        Task::Multiclass(_) => {
            let y: Vec<usize> = labels.iter().map(|&v| v as usize).collect();
            g.cross_entropy(logits, &y)
        }
    }
}

pub struct Trained {
    pub model: Model,
    pub log: TrainLog,
    pub cache: Option<ContextCache>,
    /// Training candidates encoded with the final parameters (TabR only).
    pub store: Option<CandidateStore>,
}

/// Target-space predictions of a trained model on a feature set.
pub fn predict(model: &Model, store: Option<&CandidateStore>, prep: &Prepared, feats: &Features) -> Result<Tensor> {
    let out = match model {
        Model::Tabr(m) => {
            let store = store.ok_or_else(|| Error::Config("TabR prediction needs a candidate store".into()))?;
            store.predict(m, feats, None, None)?.0
        }
        Model::Mlp(m) => m.predict(feats)?,
    };
    to_predictions(model.task(), &out, prep.pp.target_scaler())
}

fn training_store(m: &Tabr, prep: &Prepared) -> Result<CandidateStore> {
    CandidateStore::build(m, prep.train.clone(), prep.y_train.clone(), prep.train_ids.clone())
}

/// Eval-mode contexts of every training object, without itself.
fn training_contexts(m: &Tabr, store: &CandidateStore, prep: &Prepared) -> Result<Vec<ContextRecord>> {
    Ok(store.predict(m, &prep.train, Some(&prep.train_ids), None)?.1)
}

struct StepStats {
    loss: f64,
    encodings: u64,
    similarities: u64,
}

fn tabr_step(
    m: &Tabr,
    g: &mut Graph,
    prep: &Prepared,
    batch: &[usize],
    cache: Option<&ContextCache>,
    cap: Option<(usize, u64, u64, u64)>,
) -> Result<(Var, StepStats)> {
    let targets = prep.train.select(batch);
    let labels: Vec<f64> = batch.iter().map(|&i| prep.y_train[i]).collect();
    let n = prep.train.rows();
    let (out, encodings, similarities) = match cache {
        Some(cache) => {
            let cc = cache.batch(batch)?;
            let y: Vec<f64> = cc.pool.iter().map(|&i| prep.y_train[i]).collect();
            let sims = (batch.len() * cc.index.width()) as u64;
            let enc = cc.pool.len() as u64;
            let ctx = Context::Fixed {
                candidates: &prep.train.select(&cc.pool),
                labels: &y,
                index: Arc::new(cc.index),
            };
            (m.forward(g, &targets, ctx)?, enc, sims)
        }
        None => match cap {
            Some((cap, seed, epoch, b)) if cap < n => {
                let mut subset = sample(&mut stream(seed, "candidates", &[epoch, b]), n, cap).into_vec();
                subset.sort_unstable();
                let y: Vec<f64> = subset.iter().map(|&i| prep.y_train[i]).collect();
                let exclude: Vec<Option<usize>> = batch.iter().map(|i| subset.binary_search(i).ok()).collect();
                let ctx = Context::Search {
                    candidates: &prep.train.select(&subset),
                    labels: &y,
                    exclude: &exclude,
                };
                (m.forward(g, &targets, ctx)?, cap as u64, (batch.len() * cap) as u64)
            }
            _ => {
                let exclude: Vec<Option<usize>> = batch.iter().map(|&i| Some(i)).collect();
                let ctx = Context::Search {
                    candidates: &prep.train,
                    labels: &prep.y_train,
                    exclude: &exclude,
                };
                (m.forward(g, &targets, ctx)?, n as u64, (batch.len() * n) as u64)
            }
        },
    };
    let loss = task_loss(g, m.task, out.logits, &labels)?;
    let stats = StepStats {
        loss: g.value(loss).item(),
        encodings,
        similarities,
    };
    Ok((loss, stats))
}

/// Trains `model` on `prep` and restores the parameters of the best
/// validation epoch.
pub fn train(mut model: Model, prep: &Prepared, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    if model.task() != prep.task {
        return Err(Error::Config("model and dataset tasks differ".into()));
    }
    let direction = Direction::of(prep.task);
    let mut stopper = EarlyStopping::new(direction, cfg.patience);
    let mut opt = AdamW::with_decay_filter(AdamWConfig::new(cfg.lr, cfg.weight_decay), model.params(), decays);
    let mut best_params: ParamStore = model.params().clone();
    let mut log = TrainLog::default();
    let positions: Vec<usize> = (0..prep.train.rows()).collect();
    let is_tabr = matches!(model, Model::Tabr(_));
    let track = is_tabr && (cfg.track_delta_context || cfg.freeze_after.is_some());

    let mut records: Option<Vec<ContextRecord>> = None;
    let mut cache: Option<ContextCache> = None;
    // Contexts are collected between epochs only; CF-0 is the one case that
    // needs the untrained model's contexts.
    if let (Model::Tabr(m), Some(0)) = (&model, cfg.freeze_after) {
        let store = training_store(m, prep)?;
        cache = Some(freeze(&training_contexts(m, &store, prep)?, 0)?);
    }

    let mut epoch = 0;
    loop {
        if cfg.max_epochs.is_some_and(|mx| epoch >= mx) {
            break;
        }
        epoch += 1;
        let batches = make_batches(&positions, cfg.batch_size, true, cfg.seed, epoch as u64);
        let started = Instant::now();
        let (mut loss_sum, mut encodings, mut similarities) = (0.0, 0u64, 0u64);
        for (bi, batch) in batches.iter().enumerate() {
            let mut g = Graph::train(stream(cfg.seed, "dropout", &[epoch as u64, bi as u64]));
            let (loss, stats) = match &model {
                Model::Tabr(m) => {
                    let cap = cfg.candidate_cap.map(|c| (c, cfg.seed, epoch as u64, bi as u64));
                    tabr_step(m, &mut g, prep, batch, cache.as_ref(), cap)?
                }
                Model::Mlp(m) => {
                    let out = m.forward(&mut g, &prep.train.select(batch))?;
                    let labels: Vec<f64> = batch.iter().map(|&i| prep.y_train[i]).collect();
                    let loss = task_loss(&mut g, m.task, out, &labels)?;
                    let l = g.value(loss).item();
                    (loss, StepStats { loss: l, encodings: 0, similarities: 0 })
                }
            };
            if !stats.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: stats.loss,
                });
            }
            loss_sum += stats.loss;
            encodings += stats.encodings;
            similarities += stats.similarities;
            let grads = g.backward(loss, model.params())?;
            drop(g);
            opt.step(model.params_mut(), &grads)?;
        }
        let seconds = started.elapsed().as_secs_f64();

        let (val_metric, delta) = match &model {
            Model::Tabr(m) => {
                let store = training_store(m, prep)?;
                let (out, _) = store.predict(m, &prep.val, None, None)?;
                let preds = to_predictions(prep.task, &out, prep.pp.target_scaler())?;
                let val = compute_metric(prep.task, &preds, &prep.targets_val)?;
                let mut delta = None;
                if track {
                    let cur = training_contexts(m, &store, prep)?;
                    if let Some(prev) = &records {
                        let mut s = 0.0;
                        for (a, b) in prev.iter().zip(&cur) {
                            s += delta_context(a, b)?;
                        }
                        delta = Some(s / cur.len() as f64);
                    }
                    if cfg.freeze_after == Some(epoch) {
                        cache = Some(freeze(&cur, epoch)?);
                    }
                    records = Some(cur);
                }
                (val, delta)
            }
            Model::Mlp(m) => {
                let out = m.predict(&prep.val)?;
                let preds = to_predictions(prep.task, &out, prep.pp.target_scaler())?;
                (compute_metric(prep.task, &preds, &prep.targets_val)?, None)
            }
        };
        if !val_metric.is_finite() {
            return Err(Error::NonFinite(format!("validation metric at epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_metric,
            delta_context: if cfg.track_delta_context { delta } else { None },
            seconds,
            candidate_encodings: encodings,
            similarity_evals: similarities,
            frozen: cache.as_ref().is_some_and(|c| c.frozen_at < epoch),
        });
        log::info!("epoch {epoch}: loss {:.5}, val {val_metric:.5}", loss_sum / batches.len() as f64);
        match stopper.update(val_metric) {
            StopDecision::NewBest => {
                best_params = model.params().clone();
                log.best_epoch = epoch;
                log.best_val = val_metric;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    if log.epochs.is_empty() {
        return Err(Error::Config("training ran zero epochs".into()));
    }
    model.params_mut().assign(&best_params)?;
    let store = match &model {
        Model::Tabr(m) => Some(training_store(m, prep)?),
        Model::Mlp(_) => None,
    };
    Ok(Trained {
        model,
        log,
        cache,
        store,
    })
}

fn freeze(records: &[ContextRecord], epoch: usize) -> Result<ContextCache> {
    let lists: Vec<Vec<usize>> = records.iter().map(|r| r.indices.clone()).collect();
    ContextCache::new(&lists, epoch)
}
