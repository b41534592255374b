//! The retrieval module: similarity over candidates, top-m context,
//! softmax weights and value aggregation, added residually to the target's
//! representation.

mod cache;
mod search;

pub use cache::ContextCache;
pub use search::{search, search_basis, squared_norms, top_m};

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{uniform, LayerNorm, Linear};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::tensor::{gemm, ContextIndex, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    /// `q · k_i` with separate query and key maps.
    Dot,
    /// `-|k - k_i|^2`.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    /// `W_V(x_i)`.
    Wv,
    /// `W_Y(y_i) + W_V(x_i)`.
    WyWv,
    /// `W_Y(y_i) + T(k - k_i)`.
    WyT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub similarity: Similarity,
    pub value: ValueKind,
    pub m: usize,
    pub scale_by_sqrt_d: bool,
    pub include_self: bool,
    /// Dropout on the softmax weights.
    pub attention_dropout: f64,
}

impl RetrievalConfig {
    /// Rungs of the design ladder, 0 through 4; rung 4 is the final model.
    pub fn step(step: u8, attention_dropout: f64) -> Result<Self> {
        let (similarity, value, scaled, include_self) = match step {
            0 => (Similarity::Dot, ValueKind::Wv, true, true),
            1 => (Similarity::Dot, ValueKind::WyWv, true, true),
            2 => (Similarity::L2, ValueKind::WyWv, true, true),
            3 => (Similarity::L2, ValueKind::WyT, true, true),
            4 => (Similarity::L2, ValueKind::WyT, false, false),
            _ => return Err(Error::Config(format!("no ladder step {step}"))),
        };
        Ok(RetrievalConfig {
            similarity,
            value,
            m: 96,
            scale_by_sqrt_d: scaled,
            include_self,
            attention_dropout,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("context size m must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config("attention dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Plain similarity of two vectors under `cfg`, as used in the scores.
pub fn similarity(cfg: &RetrievalConfig, a: &[f64], b: &[f64]) -> f64 {
    let raw = match cfg.similarity {
        Similarity::Dot => a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
        Similarity::L2 => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
    };
    if cfg.scale_by_sqrt_d {
        raw / (a.len() as f64).sqrt()
    } else {
        raw
    }
}

/// Rows of representations, either materialized or kept as an affine map
/// `x W + b` of raw inputs. The affine form lets consecutive linear maps be
/// composed into one small matrix before touching every row.
#[derive(Clone, Copy, Debug)]
pub enum Rows {
    Dense(Var),
    Affine { x: Var, w: Var, b: Var },
}

impl Rows {
    pub fn materialize(self, g: &mut Graph) -> Result<Var> {
        match self {
            Rows::Dense(v) => Ok(v),
            Rows::Affine { x, w, b } => {
                let y = g.matmul(x, w)?;
                g.add_row_vector(y, b)
            }
        }
    }

    /// Applies a linear layer, composing when affine.
    pub fn linear(self, g: &mut Graph, store: &ParamStore, lin: &Linear) -> Result<Rows> {
        match self {
            Rows::Dense(v) => Ok(Rows::Dense(lin.forward(g, store, v)?)),
            Rows::Affine { x, w, b } => {
                let wl = g.param(store, lin.weight);
                let w2 = g.matmul(w, wl)?;
                let d = g.value(b).len();
                let b_row = g.reshape(b, &[1, d])?;
                let b2 = g.matmul(b_row, wl)?;
                let b2 = g.reshape(b2, &[lin.d_out])?;
                let b2 = match lin.bias {
                    Some(bias) => {
                        let bias = g.param(store, bias);
                        g.add(b2, bias)?
                    }
                    None => b2,
                };
                Ok(Rows::Affine { x, w: w2, b: b2 })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum LabelEncoder {
    /// Regression: `Linear(1 -> d)`.
    Linear(Linear),
    /// Classification: embedding table `[C, d]`.
    Table(ParamId),
}

/// Per-pool-row quantities consumed by the context primitives.
///
/// In the factored form the keys are `x_i A + c` for narrow raw inputs
/// `x_i`; `keys` then holds `x_i` and `key_map` holds `A` (the offset `c`
/// cancels in every score). Values are stored as a low-width basis times
/// `value_map`.
#[derive(Clone, Copy, Debug)]
pub struct Pool {
    pub keys: Var,
    pub key_map: Option<Var>,
    /// Value rows, or their basis coordinates when `value_map` is set.
    pub values: Var,
    pub value_map: Option<Var>,
    /// `k_i W1` (or `x_i A W1` when factored) for the `T` correction.
    pub hidden: Option<Var>,
}

impl Pool {
    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.keys).rows()
    }

    /// Rows of `b` after rows of `a`; both must come from the same module
    /// and graph, so the maps of `a` are kept.
    pub fn concat(g: &mut Graph, a: &Pool, b: &Pool) -> Result<Pool> {
        if a.key_map.is_some() != b.key_map.is_some() {
            return Err(Error::Config("cannot merge factored and dense pools".into()));
        }
        Ok(Pool {
            keys: g.concat_rows(&[a.keys, b.keys])?,
            key_map: a.key_map,
            values: g.concat_rows(&[a.values, b.values])?,
            value_map: a.value_map,
            hidden: match (a.hidden, b.hidden) {
                (Some(x), Some(y)) => Some(g.concat_rows(&[x, y])?),
                _ => None,
            },
        })
    }

    /// Detached copies of the pool tensors.
    pub fn tensors(&self, g: &Graph) -> PoolTensors {
        PoolTensors {
            keys: g.value(self.keys).clone(),
            key_map: self.key_map.map(|a| g.value(a).clone()),
            values: g.value(self.values).clone(),
            value_map: self.value_map.map(|m| g.value(m).clone()),
            hidden: self.hidden.map(|h| g.value(h).clone()),
        }
    }
}

/// A pool computed once and reused across batches without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolTensors {
    pub keys: Tensor,
    pub key_map: Option<Tensor>,
    pub values: Tensor,
    pub value_map: Option<Tensor>,
    pub hidden: Option<Tensor>,
}

impl PoolTensors {
    pub fn rows(&self) -> usize {
        self.keys.rows()
    }

    pub fn insert(&self, g: &mut Graph) -> Pool {
        Pool {
            keys: g.constant(self.keys.clone()),
            key_map: self.key_map.as_ref().map(|a| g.constant(a.clone())),
            values: g.constant(self.values.clone()),
            value_map: self.value_map.as_ref().map(|m| g.constant(m.clone())),
            hidden: self.hidden.as_ref().map(|h| g.constant(h.clone())),
        }
    }

    /// The listed rows, maps unchanged.
    pub fn gather(&self, rows: &[usize]) -> PoolTensors {
        PoolTensors {
            keys: self.keys.gather_rows(rows),
            key_map: self.key_map.clone(),
            values: self.values.gather_rows(rows),
            value_map: self.value_map.clone(),
            hidden: self.hidden.as_ref().map(|h| h.gather_rows(rows)),
        }
    }

    pub fn append(&mut self, other: &PoolTensors) -> Result<()> {
        if self.key_map != other.key_map || self.value_map != other.value_map {
            return Err(Error::Config("pools were encoded with different parameters".into()));
        }
        self.keys = Tensor::concat_rows(&[&self.keys, &other.keys])?;
        self.values = Tensor::concat_rows(&[&self.values, &other.values])?;
        if let (Some(a), Some(b)) = (&self.hidden, &other.hidden) {
            self.hidden = Some(Tensor::concat_rows(&[a, b])?);
        }
        Ok(())
    }

    /// Top-`m` candidate lists for `queries` from [`RetrievalModule::queries`].
    pub fn rank(&self, similarity: Similarity, queries: &Tensor, m: usize, exclude: &[Option<usize>]) -> Vec<Vec<usize>> {
        rank(similarity, queries, &self.keys, self.key_map.as_ref(), m, exclude)
    }
}

/// Top-`m` lists of `keys` (raw inputs when `key_map` is set) for search
/// vectors `queries`.
pub fn rank(
    similarity: Similarity,
    queries: &Tensor,
    keys: &Tensor,
    key_map: Option<&Tensor>,
    m: usize,
    exclude: &[Option<usize>],
) -> Vec<Vec<usize>> {
    match (similarity, key_map) {
        (Similarity::Dot, _) => search_basis(queries, keys, None, m, exclude),
        (Similarity::L2, None) => search(queries, keys, Similarity::L2, m, exclude),
        (Similarity::L2, Some(a)) => {
            // -|(x - x_i) A|^2 ranks like 2 x G x_i - x_i G x_i with G = A A^T
            let (r, d) = (a.rows(), a.cols());
            let mut gram = vec![0.0; r * r];
            gemm(r, d, r, a.data(), false, a.data(), true, &mut gram, 0.0);
            let b = queries.rows();
            let mut qg = vec![0.0; b * r];
            gemm(b, r, r, queries.data(), false, &gram, false, &mut qg, 0.0);
            let n = keys.rows();
            let mut kg = vec![0.0; n * r];
            gemm(n, r, r, keys.data(), false, &gram, false, &mut kg, 0.0);
            let norms: Vec<f64> = (0..n)
                .map(|i| kg[i * r..(i + 1) * r].iter().zip(keys.row(i)).map(|(a, b)| a * b).sum())
                .collect();
            let qg = Tensor::new(vec![b, r], qg).expect("b x r");
            search_basis(&qg, keys, Some(&norms), m, exclude)
        }
    }
}

/// What the targets contribute to retrieval.
#[derive(Clone, Copy, Debug)]
pub struct Queries {
    /// Compared against pool keys: `k` for L2 and `W_Q(x)` for the dot
    /// kind. When factored, raw inputs `x` for L2 and `W_Q(x) A^T` for dot.
    pub search: Var,
    /// `k W1 + b1` for the `T` correction (`x A W1 + b1` when factored).
    pub ffn: Option<Var>,
    pub key_map: Option<Var>,
}

pub struct RetrievalOutput {
    /// `x + sum_i w_i V_i`.
    pub output: Var,
    /// Softmax weights before dropout, `[B, width]`.
    pub weights: Var,
}

/// Parameters of the retrieval module.
#[derive(Clone, Debug)]
pub struct RetrievalModule {
    pub cfg: RetrievalConfig,
    pub d: usize,
    pub norm: Option<LayerNorm>,
    pub w_q: Option<Linear>,
    pub w_k: Linear,
    pub w_v: Option<Linear>,
    pub label: Option<LabelEncoder>,
    pub t1: Option<Linear>,
    pub t2: Option<Linear>,
    pub ffn_dropout: f64,
    /// Number of classes, 0 for regression.
    pub classes: usize,
}

impl RetrievalModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        normalize: bool,
        task: Task,
        cfg: RetrievalConfig,
        ffn_dropout: f64,
        label_init_bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let norm = normalize.then(|| LayerNorm::new(store, "retrieval.norm", d));
        let w_q = (cfg.similarity == Similarity::Dot)
            .then(|| Linear::new(store, "retrieval.w_q", d, d, true, rng));
        let w_k = Linear::new(store, "retrieval.w_k", d, d, true, rng);
        let w_v = matches!(cfg.value, ValueKind::Wv | ValueKind::WyWv)
            .then(|| Linear::new(store, "retrieval.w_v", d, d, true, rng));
        let label = (cfg.value != ValueKind::Wv).then(|| match task.n_classes() {
            None => LabelEncoder::Linear(Linear::with_bound(
                store,
                "retrieval.w_y",
                1,
                d,
                true,
                label_init_bound,
                rng,
            )),
            Some(c) => LabelEncoder::Table(store.add(
                "retrieval.w_y.table",
                uniform(rng, &[c, d], label_init_bound),
            )),
        });
        let (t1, t2) = if cfg.value == ValueKind::WyT {
            (
                Some(Linear::new(store, "retrieval.t.linear1", d, 2 * d, true, rng)),
                Some(Linear::new(store, "retrieval.t.linear2", 2 * d, d, false, rng)),
            )
        } else {
            (None, None)
        };
        Ok(RetrievalModule {
            cfg,
            d,
            norm,
            w_q,
            w_k,
            w_v,
            label,
            t1,
            t2,
            ffn_dropout,
            classes: task.n_classes().unwrap_or(0),
        })
    }

    /// Direction of the label embedding line for regression, `None` otherwise.
    pub fn label_direction(&self, store: &ParamStore) -> Option<Vec<f64>> {
        match &self.label {
            Some(LabelEncoder::Linear(l)) => Some(store.get(l.weight).data().to_vec()),
            _ => None,
        }
    }

    fn prepare(&self, g: &mut Graph, store: &ParamStore, rows: Rows) -> Result<Rows> {
        match (&self.norm, rows) {
            (None, r) => Ok(r),
            (Some(n), r) => {
                let v = r.materialize(g)?;
                Ok(Rows::Dense(n.forward(g, store, v)?))
            }
        }
    }

    fn label_embedding(&self, g: &mut Graph, store: &ParamStore, labels: &[f64]) -> Result<Var> {
        match self.label.as_ref().expect("label encoder present") {
            LabelEncoder::Linear(l) => {
                let y = g.constant(Tensor::new(vec![labels.len(), 1], labels.to_vec())?);
                l.forward(g, store, y)
            }
            LabelEncoder::Table(t) => {
                let table = g.param(store, *t);
                let idx: Vec<usize> = labels.iter().map(|&v| v as usize).collect();
                g.embedding(table, &idx)
            }
        }
    }

    fn label_count(&self) -> usize {
        match &self.label {
            None => 0,
            Some(LabelEncoder::Linear(_)) => 2,
            Some(LabelEncoder::Table(_)) => self.classes,
        }
    }

    /// Basis columns for the labels: `[y, 1]` for regression, one-hot for
    /// classes, all zero for the targets themselves.
    fn label_basis(&self, n: usize, labels: Option<&[f64]>) -> Result<Tensor> {
        let c = self.label_count();
        let mut out = vec![0.0; n * c];
        if let Some(l) = labels {
            for (r, &y) in l.iter().enumerate() {
                match &self.label {
                    Some(LabelEncoder::Linear(_)) => {
                        out[r * 2] = y;
                        out[r * 2 + 1] = 1.0;
                    }
                    Some(LabelEncoder::Table(_)) => out[r * c + y as usize] = 1.0,
                    None => {}
                }
            }
        }
        Tensor::new(vec![n, c], out)
    }

    /// Rows of the label map matching [`Self::label_basis`].
    fn label_map(&self, g: &mut Graph, store: &ParamStore) -> Result<Option<Var>> {
        Ok(match &self.label {
            None => None,
            Some(LabelEncoder::Linear(l)) => {
                let w = g.param(store, l.weight);
                let b = g.param(store, l.bias.expect("label encoder has a bias"));
                let b = g.reshape(b, &[1, self.d])?;
                Some(g.concat_rows(&[w, b])?)
            }
            Some(LabelEncoder::Table(t)) => Some(g.param(store, *t)),
        })
    }

    fn composed(&self, g: &mut Graph, store: &ParamStore, w: Var, lin: &Linear) -> Result<Var> {
        let wl = g.param(store, lin.weight);
        g.matmul(w, wl)
    }

    /// `A W1` for factored rows.
    fn hidden_map(&self, g: &mut Graph, store: &ParamStore, a: Var) -> Result<Option<Var>> {
        match &self.t1 {
            Some(t1) => Ok(Some(self.composed(g, store, a, t1)?)),
            None => Ok(None),
        }
    }

    /// Pool rows for candidates with known labels, or for the targets
    /// themselves (`labels = None`), whose label contribution is zero.
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, rows: Rows, labels: Option<&[f64]>) -> Result<Pool> {
        let rows = self.prepare(g, store, rows)?;
        let n = match rows {
            Rows::Dense(v) | Rows::Affine { x: v, .. } => g.value(v).rows(),
        };
        if let Some(l) = labels {
            if l.len() != n {
                return Err(Error::shape("retrieval_pool", format!("{} labels for {n} rows", l.len())));
            }
        }
        if let Rows::Affine { x, w, b } = rows {
            return self.factored_pool(g, store, x, w, b, labels);
        }
        let keys = rows.linear(g, store, &self.w_k)?.materialize(g)?;
        let label_part = match (&self.label, labels) {
            (None, _) => None,
            (Some(_), Some(l)) => Some(self.label_embedding(g, store, l)?),
            (Some(_), None) => Some(g.constant(Tensor::zeros(&[n, self.d]))),
        };
        let v_part = match &self.w_v {
            Some(wv) => Some(rows.linear(g, store, wv)?.materialize(g)?),
            None => None,
        };
        let values = match (label_part, v_part) {
            (Some(a), Some(b)) => g.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("every value kind has a label or W_V term"),
        };
        let hidden = match &self.t1 {
            Some(t1) => {
                let w1 = g.param(store, t1.weight);
                Some(g.matmul(keys, w1)?)
            }
            None => None,
        };
        Ok(Pool {
            keys,
            key_map: None,
            values,
            value_map: None,
            hidden,
        })
    }

    fn factored_pool(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        w: Var,
        b: Var,
        labels: Option<&[f64]>,
    ) -> Result<Pool> {
        let n = g.value(x).rows();
        let a = self.composed(g, store, w, &self.w_k)?;
        let mut basis = Vec::new();
        let mut maps = Vec::new();
        if let Some(wv) = &self.w_v {
            // W_V(x W + b) = [x, 1] [W W_V; b W_V + b_V]
            let ones = g.constant(Tensor::full(&[n, 1], 1.0));
            basis.extend([x, ones]);
            let lin = Rows::Affine { x, w, b }.linear(g, store, wv)?;
            let Rows::Affine { w: mw, b: mb, .. } = lin else { unreachable!() };
            let mb = g.reshape(mb, &[1, self.d])?;
            maps.extend([mw, mb]);
        }
        if let Some(lm) = self.label_map(g, store)? {
            basis.push(g.constant(self.label_basis(n, labels)?));
            maps.push(lm);
        }
        let values = g.concat_cols(&basis)?;
        let value_map = g.concat_rows(&maps)?;
        let hidden = match self.hidden_map(g, store, a)? {
            Some(h) => Some(g.matmul(x, h)?),
            None => None,
        };
        Ok(Pool {
            keys: x,
            key_map: Some(a),
            values,
            value_map: Some(value_map),
            hidden,
        })
    }

    /// Search vectors and `T` inputs of the targets.
    pub fn queries(&self, g: &mut Graph, store: &ParamStore, rows: Rows) -> Result<Queries> {
        let rows = self.prepare(g, store, rows)?;
        if let Rows::Affine { x, w, .. } = rows {
            let a = self.composed(g, store, w, &self.w_k)?;
            let search = match &self.w_q {
                Some(wq) => {
                    let q = rows.linear(g, store, wq)?.materialize(g)?;
                    let at = g.transpose(a)?;
                    g.matmul(q, at)?
                }
                None => x,
            };
            let ffn = match (self.hidden_map(g, store, a)?, &self.t1) {
                (Some(h), Some(t1)) => {
                    let xh = g.matmul(x, h)?;
                    // c W1 cancels against the pool side, so only b1 is added
                    let b1 = g.param(store, t1.bias.expect("T has a bias"));
                    Some(g.add_row_vector(xh, b1)?)
                }
                _ => None,
            };
            return Ok(Queries {
                search,
                ffn,
                key_map: Some(a),
            });
        }
        let r = rows.materialize(g)?;
        let k = self.w_k.forward(g, store, r)?;
        let search = match &self.w_q {
            Some(wq) => wq.forward(g, store, r)?,
            None => k,
        };
        let ffn = match &self.t1 {
            Some(t1) => Some(t1.forward(g, store, k)?),
            None => None,
        };
        Ok(Queries {
            search,
            ffn,
            key_map: None,
        })
    }

    /// Scores, softmax weights and aggregated values for a fixed context.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        q: &Queries,
        pool: &Pool,
        index: &Arc<ContextIndex>,
    ) -> Result<RetrievalOutput> {
        self.forward_removing(g, store, x, q, pool, index, None)
    }

    /// Like [`Self::forward`], but with the component along `direction`
    /// removed from every `T(k - k_i)` before aggregation. A zero direction
    /// removes nothing.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_removing(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        q: &Queries,
        pool: &Pool,
        index: &Arc<ContextIndex>,
        direction: Option<&[f64]>,
    ) -> Result<RetrievalOutput> {
        if q.key_map.is_some() != pool.key_map.is_some() {
            return Err(Error::Config("queries and pool disagree on the key form".into()));
        }
        let scale = if self.cfg.scale_by_sqrt_d {
            1.0 / (self.d as f64).sqrt()
        } else {
            1.0
        };
        let scores = match (self.cfg.similarity, pool.key_map) {
            (Similarity::L2, None) => {
                let dist = g.context_sq_dist(q.search, pool.keys, index)?;
                g.scale(dist, -scale)
            }
            (Similarity::L2, Some(a)) => {
                let dist = g.context_quad_dist(q.search, pool.keys, a, index)?;
                g.scale(dist, -scale)
            }
            // the factored dot score drops q·c, which is constant per row
            (Similarity::Dot, _) => {
                let dot = g.context_dot(q.search, pool.keys, index)?;
                g.scale(dot, scale)
            }
        };
        let weights = g.softmax(scores)?;
        let probs = g.dropout(weights, self.cfg.attention_dropout)?;
        let mut r = g.context_weighted_sum(probs, pool.values, index)?;
        if let Some(vm) = pool.value_map {
            r = g.matmul(r, vm)?;
        }
        match (&self.t2, q.ffn, pool.hidden) {
            (Some(t2), Some(a), Some(hidden)) => {
                // T is linear after the hidden layer, so summing first is exact
                let s = g.context_ffn_sum(a, hidden, probs, index, self.ffn_dropout)?;
                let mut t = t2.forward(g, store, s)?;
                if let Some(dir) = direction {
                    if let Some(proj) = self.complement_projector(dir)? {
                        let proj = g.constant(proj);
                        t = g.matmul(t, proj)?;
                    }
                }
                r = g.add(r, t)?;
            }
            _ if direction.is_some() => {
                return Err(Error::Unsupported("projection removal needs the T value kind".into()));
            }
            _ => {}
        }
        let output = g.add(x, r)?;
        Ok(RetrievalOutput { output, weights })
    }

    /// `I - u u^T` for the unit vector along `direction`, or `None` when the
    /// direction is zero.
    fn complement_projector(&self, direction: &[f64]) -> Result<Option<Tensor>> {
        let d = self.d;
        if direction.len() != d {
            return Err(Error::shape(
                "projection",
                format!("direction of {} for width {d}", direction.len()),
            ));
        }
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(None);
        }
        let u: Vec<f64> = direction.iter().map(|v| v / norm).collect();
        let mut proj = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                proj[i * d + j] = if i == j { 1.0 } else { 0.0 } - u[i] * u[j];
            }
        }
        Ok(Some(Tensor::new(vec![d, d], proj)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cfg(step: u8) -> RetrievalConfig {
        RetrievalConfig::step(step, 0.0).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let c = cfg(4);
        assert_eq!(similarity(&c, &[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(similarity(&c, &[1.0, 0.0], &[0.0, 1.0]), -2.0);
        let scaled = cfg(2);
        assert_eq!(similarity(&scaled, &[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]), -1.0);
    }

    #[test]
    fn tabr_preset() {
        let c = cfg(4);
        assert_eq!(
            (c.similarity, c.value, c.scale_by_sqrt_d, c.include_self, c.m),
            (Similarity::L2, ValueKind::WyT, false, false, 96)
        );
    }

    fn module(step: u8, task: Task, d: usize, normalize: bool) -> (ParamStore, RetrievalModule) {
        let mut s = ParamStore::new();
        let m = RetrievalModule::new(&mut s, d, normalize, task, cfg(step), 0.0, 0.5, &mut rng()).unwrap();
        (s, m)
    }

    #[test]
    fn value_with_zero_key_difference_is_label_embedding() {
        let (mut s, m) = module(4, Task::Regression, 3, false);
        let t1 = m.t1.as_ref().unwrap();
        s.get_mut(t1.bias.unwrap()).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let pool = m.pool(&mut g, &s, Rows::Dense(x), Some(&[1.5])).unwrap();
        let q = m.queries(&mut g, &s, Rows::Dense(x)).unwrap();
        let idx = Arc::new(ContextIndex::new(1, 1, vec![0]).unwrap());
        let out = m.forward(&mut g, &s, x, &q, &pool, &idx).unwrap();
        // m = 1: weight 1, r = W_Y(1.5) + T(0) = W_Y(1.5)
        let LabelEncoder::Linear(l) = m.label.as_ref().unwrap() else { panic!() };
        let (w, b) = (s.get(l.weight).data(), s.get(l.bias.unwrap()).data());
        for j in 0..3 {
            let expected = g.value(x).data()[j] + 1.5 * w[j] + b[j];
            assert!((g.value(out.output).data()[j] - expected).abs() < 1e-12);
        }
        assert_eq!(g.value(out.weights).data(), &[1.0]);
    }

    #[test]
    fn class_values_differ_by_table_rows() {
        let (s, m) = module(4, Task::Binclass, 3, false);
        let run = |label: f64| {
            let mut g = Graph::eval();
            let x = g.constant(Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.9]).unwrap());
            let c = g.constant(Tensor::new(vec![1, 3], vec![0.1, 0.4, -0.5]).unwrap());
            let pool = m.pool(&mut g, &s, Rows::Dense(c), Some(&[label])).unwrap();
            let q = m.queries(&mut g, &s, Rows::Dense(x)).unwrap();
            let idx = Arc::new(ContextIndex::new(1, 1, vec![0]).unwrap());
            let out = m.forward(&mut g, &s, x, &q, &pool, &idx).unwrap();
            g.value(out.output).data().to_vec()
        };
        let (a, b) = (run(0.0), run(1.0));
        let LabelEncoder::Table(t) = m.label.as_ref().unwrap() else { panic!() };
        let table = s.get(*t).data();
        for j in 0..3 {
            assert!(((b[j] - a[j]) - (table[3 + j] - table[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let (s, m) = module(4, Task::Regression, 2, false);
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        // three identical candidates
        let c = g.constant(Tensor::full(&[3, 2], 0.1));
        let pool = m.pool(&mut g, &s, Rows::Dense(c), Some(&[0.0, 1.0, 2.0])).unwrap();
        let q = m.queries(&mut g, &s, Rows::Dense(x)).unwrap();
        let idx = Arc::new(ContextIndex::new(1, 3, vec![0, 1, 2]).unwrap());
        let out = m.forward(&mut g, &s, x, &q, &pool, &idx).unwrap();
        for w in g.value(out.weights).data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_values_leave_representation_unchanged() {
        let (mut s, m) = module(2, Task::Regression, 2, false);
        for id in [m.w_v.as_ref().unwrap().weight, m.w_v.as_ref().unwrap().bias.unwrap()] {
            s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let LabelEncoder::Linear(l) = m.label.as_ref().unwrap() else { panic!() };
        for id in [l.weight, l.bias.unwrap()] {
            s.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap());
        let c = g.constant(Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let pool = m.pool(&mut g, &s, Rows::Dense(c), Some(&[1.0, 2.0])).unwrap();
        let q = m.queries(&mut g, &s, Rows::Dense(x)).unwrap();
        let idx = Arc::new(ContextIndex::new(1, 2, vec![0, 1]).unwrap());
        let out = m.forward(&mut g, &s, x, &q, &pool, &idx).unwrap();
        assert_eq!(g.value(out.output).data(), &[0.5, -0.5]);
    }

    /// Loss of one retrieval pass over random data; targets and candidates
    /// are affine images of raw rows, passed either factored or dense.
    fn affine_case(m: &RetrievalModule, g: &mut Graph, s: &ParamStore, factored: bool, labels: &[f64]) -> Result<Var> {
        let mut r = rng();
        let (raw_t, raw_c) = (rand_tensor(&mut r, &[3, 3]), rand_tensor(&mut r, &[6, 3]));
        let w = g.constant(rand_tensor(&mut r, &[3, m.d]));
        let b = g.constant(rand_tensor(&mut r, &[m.d]));
        let (xt, xc) = (g.constant(raw_t), g.constant(raw_c));
        let mut rows_t = Rows::Affine { x: xt, w, b };
        let mut rows_c = Rows::Affine { x: xc, w, b };
        let x = rows_t.materialize(g)?;
        if !factored {
            rows_t = Rows::Dense(x);
            rows_c = Rows::Dense(rows_c.materialize(g)?);
        }
        let mut pool = m.pool(g, s, rows_c, Some(labels))?;
        let mut idx = vec![0, 2, 5, 1, 3, 4, 5, 4, 0];
        let mut width = 3;
        if m.cfg.include_self {
            let own = m.pool(g, s, rows_t, None)?;
            pool = Pool::concat(g, &pool, &own)?;
            idx = vec![0, 2, 5, 6, 1, 3, 4, 7, 5, 4, 0, 8];
            width = 4;
        }
        let q = m.queries(g, s, rows_t)?;
        let index = Arc::new(ContextIndex::new(3, width, idx)?);
        let out = m.forward(g, s, x, &q, &pool, &index)?;
        g.mse(out.output, &vec![0.2; 3 * m.d])
    }

    #[test]
    fn factored_pool_matches_dense_pool() {
        for step in 0..=4 {
            for task in [Task::Regression, Task::Multiclass(3)] {
                let (s, m) = module(step, task, 4, false);
                let labels: Vec<f64> = (0..6).map(|i| (i % 3) as f64).collect();
                let mut g = Graph::eval();
                let a = affine_case(&m, &mut g, &s, true, &labels).unwrap();
                let b = affine_case(&m, &mut g, &s, false, &labels).unwrap();
                let (a, b) = (g.value(a).item(), g.value(b).item());
                assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "step {step}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn factored_gradients_for_every_step() {
        for step in 0..=4 {
            for task in [Task::Regression, Task::Binclass] {
                let (s, m) = module(step, task, 4, false);
                let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
                let rep = grad_check(&s, |g, s| affine_case(&m, g, s, true, &labels), &GradCheckOptions::default())
                    .unwrap();
                assert!(rep.max_rel_error < 1e-4, "step {step}: {rep:?}");
            }
        }
    }

    #[test]
    fn factored_ranking_matches_dense_ranking() {
        let mut r = rng();
        let x = rand_tensor(&mut r, &[40, 3]);
        let a = rand_tensor(&mut r, &[3, 5]);
        let q = rand_tensor(&mut r, &[7, 3]);
        let dense = |t: &Tensor| {
            let mut out = vec![0.0; t.rows() * 5];
            gemm(t.rows(), 3, 5, t.data(), false, a.data(), false, &mut out, 0.0);
            Tensor::new(vec![t.rows(), 5], out).unwrap()
        };
        let ex = [None, Some(3), None, None, Some(0), None, None];
        let f = rank(Similarity::L2, &q, &x, Some(&a), 6, &ex);
        let d = rank(Similarity::L2, &dense(&q), &dense(&x), None, 6, &ex);
        assert_eq!(f, d);
    }

    fn grad_case(step: u8, task: Task, normalize: bool) {
        let (s, m) = module(step, task, 4, normalize);
        let mut r = rng();
        let x = rand_tensor(&mut r, &[3, 4]);
        let c = rand_tensor(&mut r, &[6, 4]);
        let labels: Vec<f64> = match task.n_classes() {
            Some(k) => (0..6).map(|i| (i % k) as f64).collect(),
            None => (0..6).map(|i| i as f64 * 0.3 - 1.0).collect(),
        };
        let include_self = m.cfg.include_self;
        let rep = grad_check(
            &s,
            |g, s| {
                let xv = g.constant(x.clone());
                let cv = g.constant(c.clone());
                let mut pool = m.pool(g, s, Rows::Dense(cv), Some(&labels))?;
                let mut idx = vec![0, 2, 5, 1, 3, 4, 5, 4, 0];
                let mut width = 3;
                if include_self {
                    let own = m.pool(g, s, Rows::Dense(xv), None)?;
                    pool = Pool::concat(g, &pool, &own)?;
                    idx = vec![0, 2, 5, 6, 1, 3, 4, 7, 5, 4, 0, 8];
                    width = 4;
                }
                let q = m.queries(g, s, Rows::Dense(xv))?;
                let index = Arc::new(ContextIndex::new(3, width, idx)?);
                let out = m.forward(g, s, xv, &q, &pool, &index)?;
                g.mse(out.output, &[0.2; 12])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "step {step}: {rep:?}");
    }

    #[test]
    fn gradients_for_every_step() {
        for step in 0..=4 {
            grad_case(step, Task::Regression, false);
            grad_case(step, Task::Multiclass(3), true);
        }
    }

    proptest::proptest! {
        #[test]
        fn l2_similarity_is_symmetric_and_nonpositive(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let c = cfg(4);
            let (s1, s2) = (similarity(&c, &a, &b), similarity(&c, &b, &a));
            proptest::prop_assert_eq!(s1, s2);
            proptest::prop_assert!(s1 <= 0.0);
            proptest::prop_assert_eq!(s1 == 0.0, a == b);
        }
    }
}
