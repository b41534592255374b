//! Metrics, seed ensembles, the std-aware best-set rule, the kNN baseline
//! and the attention analyses.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::candidates::CandidateStore;
use crate::data::{Features, TargetScaler, Task};
use crate::error::{Error, Result};
use crate::model::{ContextRecord, Tabr};
use crate::retrieval::{search_basis, squared_norms};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Lower,
    Higher,
}

impl Direction {
    pub fn of(task: Task) -> Self {
        if task.is_regression() {
            Direction::Lower
        } else {
            Direction::Higher
        }
    }

    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Lower => a < b,
            Direction::Higher => a > b,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Raw model outputs to predictions in target space: de-normalized values for
/// regression, class probabilities for classification (one column for the
/// positive class of a binary task).
pub fn to_predictions(task: Task, outputs: &Tensor, scaler: Option<&TargetScaler>) -> Result<Tensor> {
    let data = match task {
        Task::Regression => {
            let s = scaler.ok_or_else(|| Error::Config("regression needs a target scaler".into()))?;
            outputs.data().iter().map(|&z| s.decode(z)).collect()
        }
        Task::Binclass => outputs.data().iter().map(|&z| sigmoid(z)).collect(),
        Task::Multiclass(_) => {
            let mut out = Vec::with_capacity(outputs.len());
            for r in 0..outputs.rows() {
                let row = outputs.row(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                out.extend(e.iter().map(|v| v / s));
            }
            out
        }
    };
    Tensor::new(outputs.shape().to_vec(), data)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// RMSE for regression, accuracy for classification. `preds` come from
/// [`to_predictions`]; `targets` are raw values or class ids.
pub fn compute_metric(task: Task, preds: &Tensor, targets: &[f64]) -> Result<f64> {
    if preds.rows() != targets.len() {
        return Err(Error::shape(
            "compute_metric",
            format!("{} predictions for {} targets", preds.rows(), targets.len()),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Config("metric over zero objects".into()));
    }
    let n = targets.len() as f64;
    Ok(match task {
        Task::Regression => {
            let se: f64 = preds.data().iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
            (se / n).sqrt()
        }
        Task::Binclass => {
            let hits = preds.data().iter().zip(targets).filter(|(p, t)| f64::from(u8::from(**p > 0.5)) == **t).count();
            hits as f64 / n
        }
        Task::Multiclass(_) => {
            let hits = (0..preds.rows()).filter(|&r| argmax(preds.row(r)) as f64 == targets[r]).count();
            hits as f64 / n
        }
    })
}

/// Splits per-seed predictions into consecutive groups of `group_size`,
/// averages predictions within each group and returns the mean group metric.
pub fn ensemble_evaluate(task: Task, sets: &[Tensor], group_size: usize, targets: &[f64]) -> Result<f64> {
    if group_size == 0 || sets.is_empty() || !sets.len().is_multiple_of(group_size) {
        return Err(Error::Config(format!(
            "{} prediction sets do not split into groups of {group_size}",
            sets.len()
        )));
    }
    let shape = sets[0].shape();
    if sets.iter().any(|s| s.shape() != shape) {
        return Err(Error::shape("ensemble_evaluate", "prediction sets differ in shape"));
    }
    let mut total = 0.0;
    let groups = sets.chunks(group_size);
    let n_groups = groups.len();
    for group in groups {
        let mut avg = vec![0.0; sets[0].len()];
        for s in group {
            for (a, v) in avg.iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        avg.iter_mut().for_each(|a| *a /= group.len() as f64);
        total += compute_metric(task, &Tensor::new(shape.to_vec(), avg)?, targets)?;
    }
    Ok(total / n_groups as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub algorithm: String,
    pub dataset: String,
    pub metrics: Vec<f64>,
}

impl RunResult {
    pub fn mean(&self) -> f64 {
        self.metrics.iter().sum::<f64>() / self.metrics.len() as f64
    }

    /// Sample standard deviation; zero for a single run.
    pub fn std(&self) -> f64 {
        let n = self.metrics.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.metrics.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    pub fn csv_row(&self) -> String {
        let per: Vec<String> = self.metrics.iter().map(|v| format!("{v:.6}")).collect();
        format!(
            "{},{},{:.6},{:.6},{}",
            self.algorithm,
            self.dataset,
            self.mean(),
            self.std(),
            per.join(";")
        )
    }
}

/// Algorithms whose mean is within the preliminary best's std of its mean.
pub fn best_set(results: &[RunResult], direction: Direction) -> Vec<String> {
    let Some(best) = results.iter().reduce(|a, b| if direction.better(b.mean(), a.mean()) { b } else { a }) else {
        return Vec::new();
    };
    let (m, s) = (best.mean(), best.std());
    results
        .iter()
        .filter(|r| (r.mean() - m).abs() <= s || std::ptr::eq(*r, best))
        .map(|r| r.algorithm.clone())
        .collect()
}

/// Euclidean `k` nearest training rows for every query, nearest first, ties
/// to the lower index.
pub fn knn_neighbors(train: &Tensor, queries: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > train.rows() {
        return Err(Error::Config(format!("k = {k} with {} training rows", train.rows())));
    }
    if train.cols() != queries.cols() {
        return Err(Error::shape("knn", "query width differs from training width"));
    }
    let norms = squared_norms(train);
    Ok(search_basis(queries, train, Some(&norms), k, &vec![None; queries.rows()]))
}

/// kNN predictions in target space: mean label for regression, class
/// probabilities from vote shares (ties resolve to the lowest class when
/// taking the argmax).
pub fn knn_predict(task: Task, train: &Features, y_train: &[f64], queries: &Features, k: usize) -> Result<Tensor> {
    if y_train.len() != train.rows() {
        return Err(Error::shape("knn", "one label per training row"));
    }
    let nb = knn_neighbors(&train.concat(), &queries.concat(), k)?;
    let width = task.n_outputs();
    let mut out = Vec::with_capacity(nb.len() * width);
    for list in nb {
        match task {
            Task::Regression => out.push(list.iter().map(|&i| y_train[i]).sum::<f64>() / k as f64),
            Task::Binclass => out.push(list.iter().map(|&i| y_train[i]).sum::<f64>() / k as f64),
            Task::Multiclass(c) => {
                let mut votes = vec![0.0; c];
                for &i in &list {
                    votes[y_train[i] as usize] += 1.0 / k as f64;
                }
                out.extend(votes);
            }
        }
    }
    Tensor::new(vec![queries.rows(), width], out)
}

/// Entropy (natural log) of the average attention distribution over
/// candidates. Mass on the object itself goes to one extra atom shared by
/// all objects.
pub fn attention_entropy(records: &[ContextRecord], n_candidates: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let mut avg = vec![0.0; n_candidates + 1];
    for r in records {
        for (&i, &w) in r.indices.iter().zip(&r.weights) {
            avg[i] += w;
        }
        avg[n_candidates] += r.self_weight;
    }
    let n = records.len() as f64;
    avg.iter()
        .map(|&s| s / n)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subspace {
    /// The line spanned by the regression label embedding.
    LabelLine,
    /// A random unit direction drawn from the given seed.
    Random(u64),
}

/// Direction removed by [`value_projection_ablation`].
pub fn ablation_direction(model: &Tabr, subspace: Subspace) -> Result<Vec<f64>> {
    let line = model
        .retrieval
        .label_direction(&model.params)
        .ok_or_else(|| Error::Unsupported("value projection ablation needs a regression TabR with label embeddings".into()))?;
    Ok(match subspace {
        Subspace::LabelLine => line,
        Subspace::Random(seed) => {
            let mut rng = stream(seed, "projection", &[]);
            (0..line.len()).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    })
}

/// Test metric with the component of every `T(k - k_i)` along the chosen
/// direction removed, without retraining.
pub fn value_projection_ablation(
    model: &Tabr,
    store: &CandidateStore,
    features: &Features,
    targets: &[f64],
    scaler: &TargetScaler,
    direction: &[f64],
) -> Result<f64> {
    if !model.task.is_regression() {
        return Err(Error::Unsupported("value projection ablation is defined for regression".into()));
    }
    let (out, _) = store.predict(model, features, None, Some(direction))?;
    let preds = to_predictions(model.task, &out, Some(scaler))?;
    compute_metric(model.task, &preds, targets)
}
