use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm, Mask};
use super::params::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How dropout behaves while the graph is built.
pub enum Mode {
    /// Dropout is the identity.
    Eval,
    /// Dropout samples masks from the given stream.
    Train(ChaCha8Rng),
    /// Deterministic mode for finite differences: any dropout with a
    /// positive rate is rejected.
    GradCheck,
}

/// Per-row lists of pool indices shared by the context primitives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextIndex {
    rows: usize,
    width: usize,
    indices: Vec<usize>,
}

impl ContextIndex {
    pub fn new(rows: usize, width: usize, indices: Vec<usize>) -> Result<Self> {
        if rows * width != indices.len() {
            return Err(Error::shape(
                "context_index",
                format!("{rows} x {width} needs {} entries, got {}", rows * width, indices.len()),
            ));
        }
        Ok(ContextIndex {
            rows,
            width,
            indices,
        })
    }

    pub fn from_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let width = lists.first().map_or(0, Vec::len);
        let mut indices = Vec::with_capacity(lists.len() * width);
        for l in lists {
            if l.len() != width {
                return Err(Error::shape("context_index", "ragged context lists"));
            }
            indices.extend_from_slice(l);
        }
        Self::new(lists.len(), width, indices)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.indices[b * self.width..(b + 1) * self.width]
    }

    fn check_pool(&self, op: &'static str, pool_rows: usize) -> Result<()> {
        match self.indices.iter().max() {
            Some(&mx) if mx >= pool_rows => Err(Error::shape(
                op,
                format!("index {mx} out of range for pool of {pool_rows} rows"),
            )),
            _ => Ok(()),
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRowVector(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Dropout {
        x: Var,
        mask: Mask,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    PairwiseSqDist(Var, Var),
    ContextSqDist {
        query: Var,
        pool: Var,
        index: Arc<ContextIndex>,
    },
    ContextDot {
        query: Var,
        pool: Var,
        index: Arc<ContextIndex>,
    },
    ContextQuadDist {
        query: Var,
        pool: Var,
        map: Var,
        /// `A A^T`
        gram: Vec<f64>,
        index: Arc<ContextIndex>,
    },
    ContextWeightedSum {
        weights: Var,
        pool: Var,
        index: Arc<ContextIndex>,
    },
    ContextFfnSum {
        target: Var,
        pool: Var,
        weights: Var,
        index: Arc<ContextIndex>,
        mask: Option<Mask>,
    },
    Periodic {
        x: Var,
        freq: Var,
    },
    FeatureLinear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    BinaryCrossEntropy {
        logits: Var,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so every
/// operand id precedes its consumer and the reverse sweep is a simple loop.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<ParamId, Var>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
        }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self::new(Mode::Train(rng))
    }

    pub fn grad_check() -> Self {
        Self::new(Mode::GradCheck)
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, operands: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => operands.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Inserts a parameter once per graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`d` vector to every row of an `n x d` matrix.
    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2("add_row_vector", self.value(x))?;
        if self.value(bias).len() != d {
            return Err(Error::shape(
                "add_row_vector",
                format!("bias of {} for width {d}", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..n {
            for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::AddRowVector(x, bias), &[x, bias]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * factor).collect(),
        };
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(x), &[x])
    }

    /// Normalizes every row over the last axis, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims2("layer_norm", self.value(x))?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {d} entries")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                normalized[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.push(Tensor::new(vec![n, d], out)?, op, &[x, gain, bias]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2("softmax", self.value(x))?;
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (row[j] - mx).exp();
                out[r * d + j] = e;
                z += e;
            }
            for v in &mut out[r * d..(r + 1) * d] {
                *v /= z;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::Softmax(x), &[x]))
    }

    fn sample_mask(&mut self, op: &'static str, len: usize, rate: f64) -> Result<Option<Mask>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("{op}: dropout rate {rate} outside [0, 1)")));
        }
        match &mut self.mode {
            Mode::Eval => Ok(None),
            _ if rate == 0.0 => Ok(None),
            Mode::GradCheck => Err(Error::GradCheck(format!(
                "{op} with rate {rate} is active; disable dropout before checking gradients"
            ))),
            Mode::Train(rng) => Ok(Some(Mask::sample(len, rate, rng))),
        }
    }

    /// Inverted dropout; identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let len = self.value(x).len();
        match self.sample_mask("dropout", len, rate)? {
            None => Ok(x),
            Some(mask) => {
                let t = self.value(x);
                let data = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * mask.factor(i))
                    .collect();
                let out = Tensor {
                    shape: t.shape().to_vec(),
                    data,
                };
                Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
            }
        }
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let out = self.value(x).gather_rows(indices);
        let op = Op::GatherRows {
            x,
            indices: indices.to_vec(),
        };
        Ok(self.push(out, op, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let mut n = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat_cols", self.value(p))?;
            if *n.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let n = n.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..n {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x]))
    }

    /// `out[i, j] = ||a_i - b_j||^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = dims2("pairwise_sq_dist", self.value(a))?;
        let (k, d2) = dims2("pairwise_sq_dist", self.value(b))?;
        if d != d2 {
            return Err(Error::shape("pairwise_sq_dist", format!("widths {d} vs {d2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] = sq_dist(&av[i * d..(i + 1) * d], &bv[j * d..(j + 1) * d]);
            }
        }
        Ok(self.push(Tensor::new(vec![n, k], out)?, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    fn check_context(
        &self,
        op: &'static str,
        query: Var,
        pool: Var,
        index: &ContextIndex,
    ) -> Result<(usize, usize)> {
        let (b, d) = dims2(op, self.value(query))?;
        let (p, d2) = dims2(op, self.value(pool))?;
        if d != d2 || b != index.rows {
            return Err(Error::shape(
                op,
                format!("query [{b}, {d}], pool [{p}, {d2}], index rows {}", index.rows),
            ));
        }
        index.check_pool(op, p)?;
        Ok((b, d))
    }

    /// `out[b, j] = ||query_b - pool[index[b, j]]||^2`.
    pub fn context_sq_dist(&mut self, query: Var, pool: Var, index: &Arc<ContextIndex>) -> Result<Var> {
        let (b, d) = self.check_context("context_sq_dist", query, pool, index)?;
        let (q, p) = (self.value(query).data(), self.value(pool).data());
        let w = index.width;
        let mut out = vec![0.0; b * w];
        for r in 0..b {
            let qr = &q[r * d..(r + 1) * d];
            for (j, &i) in index.row(r).iter().enumerate() {
                out[r * w + j] = sq_dist(qr, &p[i * d..(i + 1) * d]);
            }
        }
        let op = Op::ContextSqDist {
            query,
            pool,
            index: Arc::clone(index),
        };
        Ok(self.push(Tensor::new(vec![b, w], out)?, op, &[query, pool]))
    }

    /// `out[b, j] = query_b · pool[index[b, j]]`.
    pub fn context_dot(&mut self, query: Var, pool: Var, index: &Arc<ContextIndex>) -> Result<Var> {
        let (b, d) = self.check_context("context_dot", query, pool, index)?;
        let (q, p) = (self.value(query).data(), self.value(pool).data());
        let w = index.width;
        let mut out = vec![0.0; b * w];
        for r in 0..b {
            let qr = &q[r * d..(r + 1) * d];
            for (j, &i) in index.row(r).iter().enumerate() {
                out[r * w + j] = dot(qr, &p[i * d..(i + 1) * d]);
            }
        }
        let op = Op::ContextDot {
            query,
            pool,
            index: Arc::clone(index),
        };
        Ok(self.push(Tensor::new(vec![b, w], out)?, op, &[query, pool]))
    }

    /// `out[b, j] = ||(query_b - pool[index[b, j]]) A||^2` for a map `A` of
    /// shape `[r, d]`, computed through the `r x r` Gram matrix `A A^T`.
    pub fn context_quad_dist(&mut self, query: Var, pool: Var, map: Var, index: &Arc<ContextIndex>) -> Result<Var> {
        let (b, r) = self.check_context("context_quad_dist", query, pool, index)?;
        let (r2, d) = dims2("context_quad_dist", self.value(map))?;
        if r2 != r {
            return Err(Error::shape("context_quad_dist", format!("inputs of width {r}, map [{r2}, {d}]")));
        }
        let a = self.value(map).data();
        let mut gram = vec![0.0; r * r];
        gemm(r, d, r, a, false, a, true, &mut gram, 0.0);
        let (q, p) = (self.value(query).data(), self.value(pool).data());
        let w = index.width;
        let mut out = vec![0.0; b * w];
        let mut diff = vec![0.0; r];
        for row in 0..b {
            let qr = &q[row * r..(row + 1) * r];
            for (j, &i) in index.row(row).iter().enumerate() {
                for (t, v) in diff.iter_mut().enumerate() {
                    *v = qr[t] - p[i * r + t];
                }
                out[row * w + j] = quad_form(&gram, &diff);
            }
        }
        let op = Op::ContextQuadDist {
            query,
            pool,
            map,
            gram,
            index: Arc::clone(index),
        };
        Ok(self.push(Tensor::new(vec![b, w], out)?, op, &[query, pool, map]))
    }

    fn check_weights(&self, op: &'static str, weights: Var, index: &ContextIndex) -> Result<()> {
        let (b, w) = dims2(op, self.value(weights))?;
        if b != index.rows || w != index.width {
            return Err(Error::shape(
                op,
                format!("weights [{b}, {w}] vs index [{}, {}]", index.rows, index.width),
            ));
        }
        Ok(())
    }

    /// `out[b] = sum_j weights[b, j] * pool[index[b, j]]`.
    pub fn context_weighted_sum(
        &mut self,
        weights: Var,
        pool: Var,
        index: &Arc<ContextIndex>,
    ) -> Result<Var> {
        self.check_weights("context_weighted_sum", weights, index)?;
        let (prow, d) = dims2("context_weighted_sum", self.value(pool))?;
        index.check_pool("context_weighted_sum", prow)?;
        let (wv, p) = (self.value(weights).data(), self.value(pool).data());
        let (b, w) = (index.rows, index.width);
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            let o = &mut out[r * d..(r + 1) * d];
            for (j, &i) in index.row(r).iter().enumerate() {
                let c = wv[r * w + j];
                for (ov, pv) in o.iter_mut().zip(&p[i * d..(i + 1) * d]) {
                    *ov += c * pv;
                }
            }
        }
        let op = Op::ContextWeightedSum {
            weights,
            pool,
            index: Arc::clone(index),
        };
        Ok(self.push(Tensor::new(vec![b, d], out)?, op, &[weights, pool]))
    }

    /// Fused first half of the value correction network summed over a context:
    /// `out[b] = sum_j weights[b, j] * dropout(relu(target_b - pool[index[b, j]]))`.
    ///
    /// With `target = k W1 + b1` and `pool = k_i W1` the summand is the hidden
    /// activation of `T(k - k_i)`; the bias-free output layer is linear and is
    /// applied once to the sum by the caller.
    pub fn context_ffn_sum(
        &mut self,
        target: Var,
        pool: Var,
        weights: Var,
        index: &Arc<ContextIndex>,
        dropout_rate: f64,
    ) -> Result<Var> {
        let (b, h) = self.check_context("context_ffn_sum", target, pool, index)?;
        self.check_weights("context_ffn_sum", weights, index)?;
        let w = index.width;
        let mask = self.sample_mask("context_ffn_sum", b * w * h, dropout_rate)?;
        let (t, p, wv) = (
            self.value(target).data(),
            self.value(pool).data(),
            self.value(weights).data(),
        );
        let mut out = vec![0.0; b * h];
        let mut f = vec![1.0; h];
        for r in 0..b {
            let tr = &t[r * h..(r + 1) * h];
            let o = &mut out[r * h..(r + 1) * h];
            for (j, &i) in index.row(r).iter().enumerate() {
                let c = wv[r * w + j];
                let pr = &p[i * h..(i + 1) * h];
                if let Some(m) = &mask {
                    m.factors((r * w + j) * h, &mut f);
                }
                for k in 0..h {
                    o[k] += c * f[k] * (tr[k] - pr[k]).max(0.0);
                }
            }
        }
        let op = Op::ContextFfnSum {
            target,
            pool,
            weights,
            index: Arc::clone(index),
            mask,
        };
        Ok(self.push(Tensor::new(vec![b, h], out)?, op, &[target, pool, weights]))
    }

    /// Periodic feature expansion: for `x: [n, p]` and `freq: [p, k]`
    /// produces `[n, p * 2k]` laid out per feature as `[cos(2π c x), sin(2π c x)]`.
    pub fn periodic(&mut self, x: Var, freq: Var) -> Result<Var> {
        let (n, p) = dims2("periodic", self.value(x))?;
        let (p2, k) = dims2("periodic", self.value(freq))?;
        if p != p2 {
            return Err(Error::shape("periodic", format!("{p} features vs {p2} frequency rows")));
        }
        let (xs, cs) = (self.value(x).data(), self.value(freq).data());
        let width = p * 2 * k;
        let mut out = vec![0.0; n * width];
        for r in 0..n {
            for j in 0..p {
                let xv = xs[r * p + j];
                let base = r * width + j * 2 * k;
                for l in 0..k {
                    let a = TAU * cs[j * k + l] * xv;
                    out[base + l] = a.cos();
                    out[base + k + l] = a.sin();
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, width], out)?, Op::Periodic { x, freq }, &[x, freq]))
    }

    /// Per-feature affine maps: `x` is `[n, p * q]` viewed as `[n, p, q]`,
    /// `weight` is `[p, q, e]`, `bias` is `[p, e]`; output is `[n, p * e]`.
    pub fn feature_linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, pq) = dims2("feature_linear", self.value(x))?;
        let (p, q, e) = match self.value(weight).shape() {
            [p, q, e] => (*p, *q, *e),
            s => return Err(Error::shape("feature_linear", format!("weight shape {s:?}"))),
        };
        if p * q != pq || self.value(bias).shape() != [p, e] {
            return Err(Error::shape(
                "feature_linear",
                format!("x width {pq}, weight [{p}, {q}, {e}], bias {:?}", self.value(bias).shape()),
            ));
        }
        let (xs, ws, bs) = (
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![0.0; n * p * e];
        for r in 0..n {
            for j in 0..p {
                let o = &mut out[(r * p + j) * e..(r * p + j + 1) * e];
                o.copy_from_slice(&bs[j * e..(j + 1) * e]);
                for a in 0..q {
                    let xv = xs[r * pq + j * q + a];
                    let wr = &ws[(j * q + a) * e..(j * q + a + 1) * e];
                    for (ov, wv) in o.iter_mut().zip(wr) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let op = Op::FeatureLinear { x, weight, bias };
        Ok(self.push(Tensor::new(vec![n, p * e], out)?, op, &[x, weight, bias]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error against constant targets (one per prediction entry).
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape("mse", format!("{} predictions vs {} targets", p.len(), target.len())));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let op = Op::Mse {
            pred,
            target: target.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// Mean cross-entropy of `[n, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = dims2("cross_entropy", self.value(logits))?;
        if n != labels.len() {
            return Err(Error::shape("cross_entropy", format!("{n} rows vs {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("label {bad} with {c} classes")));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total += log_sum_exp(&z[r * c..(r + 1) * c]) - z[r * c + y];
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n as f64), op, &[logits]))
    }

    /// Mean binary cross-entropy of single logits against {0, 1} labels.
    pub fn binary_cross_entropy(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} logits vs {} labels", z.len(), labels.len()),
            ));
        }
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let op = Op::BinaryCrossEntropy {
            logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / z.len() as f64), op, &[logits]))
    }

    /// Reverse sweep from a scalar node. Parameters the loss does not reach
    /// get zero gradients.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(store);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &gout, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(
        &self,
        node: &Node,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Gradients,
    ) -> Result<()> {
        macro_rules! buf {
            ($v:expr) => {
                slot(&self.nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let g = params.get_mut(*id);
                for (a, b) in g.data_mut().iter_mut().zip(gout) {
                    *a += b;
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", self.value(a))?;
                let n = self.value(b).shape()[1];
                if self.wants(a) {
                    // dA = dC · B^T
                    let bv = self.value(b).data();
                    gemm(m, n, k, gout, false, bv, true, buf!(a), 1.0);
                }
                if self.wants(b) {
                    // dB = A^T · dC
                    let av = self.value(a).data();
                    gemm(k, m, n, av, true, gout, false, buf!(b), 1.0);
                }
            }
            &Op::AddRowVector(x, bias) => {
                let d = self.value(bias).len();
                if self.wants(x) {
                    add_into(buf!(x), gout);
                }
                if self.wants(bias) {
                    let gb = buf!(bias);
                    for row in gout.chunks(d) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    add_into(buf!(a), gout);
                }
                if self.wants(b) {
                    add_into(buf!(b), gout);
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    add_into(buf!(a), gout);
                }
                if self.wants(b) {
                    for (g, v) in buf!(b).iter_mut().zip(gout) {
                        *g -= v;
                    }
                }
            }
            &Op::Scale(x, f) => {
                for (g, v) in buf!(x).iter_mut().zip(gout) {
                    *g += f * v;
                }
            }
            &Op::Relu(x) => {
                let xs = self.value(x).data();
                for ((g, v), xv) in buf!(x).iter_mut().zip(gout).zip(xs) {
                    if *xv > 0.0 {
                        *g += v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let g = self.value(*gain).data().to_vec();
                if self.wants(*gain) {
                    let gg = buf!(*gain);
                    for (row_g, row_h) in gout.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = buf!(*bias);
                    for row in gout.chunks(d) {
                        add_into(gb, row);
                    }
                }
                if self.wants(*x) {
                    let gx = buf!(*x);
                    for (r, (row_g, row_h)) in gout.chunks(d).zip(normalized.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = row_g[j] * g[j];
                            s1 += dh;
                            s2 += dh * row_h[j];
                        }
                        let inv = inv_std[r];
                        let dn = d as f64;
                        for j in 0..d {
                            let dh = row_g[j] * g[j];
                            gx[r * d + j] += inv * (dh - s1 / dn - row_h[j] * s2 / dn);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                let gx = buf!(x);
                for r in 0..node.value.rows() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                for (i, (g, v)) in buf!(*x).iter_mut().zip(gout).enumerate() {
                    *g += v * mask.factor(i);
                }
            }
            Op::GatherRows { x, indices } => {
                let c = self.value(*x).cols();
                let gx = buf!(*x);
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gx[i * c..(i + 1) * c], &gout[r * c..(r + 1) * c]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        add_into(buf!(p), &gout[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let gp = buf!(p);
                        for r in 0..n {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &gout[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            &Op::Reshape(x) => add_into(buf!(x), gout),
            &Op::Transpose(x) => {
                let (r, c) = dims2("transpose", self.value(x))?;
                let gx = buf!(x);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += gout[j * r + i];
                    }
                }
            }
            &Op::PairwiseSqDist(a, b) => {
                let (n, d) = dims2("pairwise_sq_dist", self.value(a))?;
                let k = self.value(b).rows();
                let (av, bv) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; k * d];
                for i in 0..n {
                    for j in 0..k {
                        let g = 2.0 * gout[i * k + j];
                        for t in 0..d {
                            let diff = g * (av[i * d + t] - bv[j * d + t]);
                            ga[i * d + t] += diff;
                            gb[j * d + t] -= diff;
                        }
                    }
                }
                if self.wants(a) {
                    add_into(buf!(a), &ga);
                }
                if self.wants(b) {
                    add_into(buf!(b), &gb);
                }
            }
            Op::ContextSqDist { query, pool, index } => {
                let d = self.value(*query).cols();
                let (q, p) = (self.value(*query).data(), self.value(*pool).data());
                let w = index.width;
                let mut gq = vec![0.0; q.len()];
                let mut gp = vec![0.0; p.len()];
                for r in 0..index.rows {
                    for (j, &i) in index.row(r).iter().enumerate() {
                        let g = 2.0 * gout[r * w + j];
                        if g == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = g * (q[r * d + t] - p[i * d + t]);
                            gq[r * d + t] += diff;
                            gp[i * d + t] -= diff;
                        }
                    }
                }
                if self.wants(*query) {
                    add_into(buf!(*query), &gq);
                }
                if self.wants(*pool) {
                    add_into(buf!(*pool), &gp);
                }
            }
            Op::ContextDot { query, pool, index } => {
                let d = self.value(*query).cols();
                let (q, p) = (self.value(*query).data(), self.value(*pool).data());
                let w = index.width;
                let mut gq = vec![0.0; q.len()];
                let mut gp = vec![0.0; p.len()];
                for r in 0..index.rows {
                    for (j, &i) in index.row(r).iter().enumerate() {
                        let g = gout[r * w + j];
                        for t in 0..d {
                            gq[r * d + t] += g * p[i * d + t];
                            gp[i * d + t] += g * q[r * d + t];
                        }
                    }
                }
                if self.wants(*query) {
                    add_into(buf!(*query), &gq);
                }
                if self.wants(*pool) {
                    add_into(buf!(*pool), &gp);
                }
            }
            Op::ContextQuadDist {
                query,
                pool,
                map,
                gram,
                index,
            } => {
                let r = self.value(*query).cols();
                let (q, p) = (self.value(*query).data(), self.value(*pool).data());
                let w = index.width;
                let mut gq = vec![0.0; q.len()];
                let mut gp = vec![0.0; p.len()];
                // S = sum g δ δ^T, so that dL/dA = (S + S^T) A = 2 S A
                let mut s = vec![0.0; r * r];
                let mut diff = vec![0.0; r];
                let mut gd = vec![0.0; r];
                for row in 0..index.rows {
                    for (j, &i) in index.row(row).iter().enumerate() {
                        let g = gout[row * w + j];
                        if g == 0.0 {
                            continue;
                        }
                        for (t, v) in diff.iter_mut().enumerate() {
                            *v = q[row * r + t] - p[i * r + t];
                        }
                        for a in 0..r {
                            let ga = g * diff[a];
                            for c in 0..r {
                                s[a * r + c] += ga * diff[c];
                            }
                        }
                        for a in 0..r {
                            gd[a] = 2.0 * g * dot(&gram[a * r..(a + 1) * r], &diff);
                        }
                        for t in 0..r {
                            gq[row * r + t] += gd[t];
                            gp[i * r + t] -= gd[t];
                        }
                    }
                }
                if self.wants(*query) {
                    add_into(buf!(*query), &gq);
                }
                if self.wants(*pool) {
                    add_into(buf!(*pool), &gp);
                }
                if self.wants(*map) {
                    let d = self.value(*map).cols();
                    let mut ga = vec![0.0; r * d];
                    gemm(r, r, d, &s, false, self.value(*map).data(), false, &mut ga, 0.0);
                    ga.iter_mut().for_each(|v| *v *= 2.0);
                    add_into(buf!(*map), &ga);
                }
            }
            Op::ContextWeightedSum {
                weights,
                pool,
                index,
            } => {
                let d = self.value(*pool).cols();
                let (wv, p) = (self.value(*weights).data(), self.value(*pool).data());
                let w = index.width;
                if self.wants(*weights) {
                    let gw = buf!(*weights);
                    for r in 0..index.rows {
                        let gr = &gout[r * d..(r + 1) * d];
                        for (j, &i) in index.row(r).iter().enumerate() {
                            gw[r * w + j] += dot(gr, &p[i * d..(i + 1) * d]);
                        }
                    }
                }
                if self.wants(*pool) {
                    let gp = buf!(*pool);
                    for r in 0..index.rows {
                        let gr = &gout[r * d..(r + 1) * d];
                        for (j, &i) in index.row(r).iter().enumerate() {
                            let c = wv[r * w + j];
                            for (g, v) in gp[i * d..(i + 1) * d].iter_mut().zip(gr) {
                                *g += c * v;
                            }
                        }
                    }
                }
            }
            Op::ContextFfnSum {
                target,
                pool,
                weights,
                index,
                mask,
            } => {
                let h = self.value(*target).cols();
                let (t, p, wv) = (
                    self.value(*target).data(),
                    self.value(*pool).data(),
                    self.value(*weights).data(),
                );
                let w = index.width;
                let mut gt = vec![0.0; t.len()];
                let mut gp = vec![0.0; p.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut f = vec![1.0; h];
                for (r, j) in pool_order(index) {
                    let i = index.row(r)[j];
                    let gr = &gout[r * h..(r + 1) * h];
                    let tr = &t[r * h..(r + 1) * h];
                    let c = wv[r * w + j];
                    let pr = &p[i * h..(i + 1) * h];
                    if let Some(m) = mask {
                        m.factors((r * w + j) * h, &mut f);
                    }
                    let mut acc_w = 0.0;
                    let gtr = &mut gt[r * h..(r + 1) * h];
                    let gpr = &mut gp[i * h..(i + 1) * h];
                    for k in 0..h {
                        let pre = tr[k] - pr[k];
                        let gf = gr[k] * f[k];
                        acc_w += gf * pre.max(0.0);
                        let dpre = if pre > 0.0 { gf * c } else { 0.0 };
                        gtr[k] += dpre;
                        gpr[k] -= dpre;
                    }
                    gw[r * w + j] += acc_w;
                }
                if self.wants(*target) {
                    add_into(buf!(*target), &gt);
                }
                if self.wants(*pool) {
                    add_into(buf!(*pool), &gp);
                }
                if self.wants(*weights) {
                    add_into(buf!(*weights), &gw);
                }
            }
            &Op::Periodic { x, freq } => {
                let (n, p) = dims2("periodic", self.value(x))?;
                let k = self.value(freq).cols();
                let (xs, cs) = (self.value(x).data(), self.value(freq).data());
                let y = node.value.data();
                let width = p * 2 * k;
                let mut gx = vec![0.0; xs.len()];
                let mut gc = vec![0.0; cs.len()];
                for r in 0..n {
                    for j in 0..p {
                        let xv = xs[r * p + j];
                        let base = r * width + j * 2 * k;
                        for l in 0..k {
                            let (cosv, sinv) = (y[base + l], y[base + k + l]);
                            // d/da of (cos a, sin a) is (-sin a, cos a)
                            let da = -sinv * gout[base + l] + cosv * gout[base + k + l];
                            gx[r * p + j] += da * TAU * cs[j * k + l];
                            gc[j * k + l] += da * TAU * xv;
                        }
                    }
                }
                if self.wants(x) {
                    add_into(buf!(x), &gx);
                }
                if self.wants(freq) {
                    add_into(buf!(freq), &gc);
                }
            }
            &Op::FeatureLinear { x, weight, bias } => {
                let (n, pq) = dims2("feature_linear", self.value(x))?;
                let (p, q, e) = match self.value(weight).shape() {
                    [p, q, e] => (*p, *q, *e),
                    _ => unreachable!("validated in forward"),
                };
                let (xs, ws) = (self.value(x).data(), self.value(weight).data());
                let mut gx = vec![0.0; xs.len()];
                let mut gw = vec![0.0; ws.len()];
                let mut gb = vec![0.0; p * e];
                for r in 0..n {
                    for j in 0..p {
                        let go = &gout[(r * p + j) * e..(r * p + j + 1) * e];
                        add_into(&mut gb[j * e..(j + 1) * e], go);
                        for a in 0..q {
                            let xi = r * pq + j * q + a;
                            let wo = (j * q + a) * e;
                            let mut s = 0.0;
                            for t in 0..e {
                                s += go[t] * ws[wo + t];
                                gw[wo + t] += go[t] * xs[xi];
                            }
                            gx[xi] += s;
                        }
                    }
                }
                if self.wants(x) {
                    add_into(buf!(x), &gx);
                }
                if self.wants(weight) {
                    add_into(buf!(weight), &gw);
                }
                if self.wants(bias) {
                    add_into(buf!(bias), &gb);
                }
            }
            &Op::Sum(x) => {
                let g = gout[0];
                buf!(x).iter_mut().for_each(|v| *v += g);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                let g = gout[0] / n;
                buf!(x).iter_mut().for_each(|v| *v += g);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let scale = 2.0 * gout[0] / p.len() as f64;
                for ((g, a), b) in buf!(*pred).iter_mut().zip(p).zip(target) {
                    *g += scale * (a - b);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let c = self.value(*logits).cols();
                let z = self.value(*logits).data();
                let scale = gout[0] / labels.len() as f64;
                let gz = buf!(*logits);
                for (r, &y) in labels.iter().enumerate() {
                    let row = &z[r * c..(r + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let t = if j == y { 1.0 } else { 0.0 };
                        gz[r * c + j] += scale * (p - t);
                    }
                }
            }
            Op::BinaryCrossEntropy { logits, labels } => {
                let z = self.value(*logits).data();
                let scale = gout[0] / labels.len() as f64;
                for ((g, &zv), &y) in buf!(*logits).iter_mut().zip(z).zip(labels) {
                    *g += scale * (sigmoid(zv) - y);
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
/// Context entries `(row, slot)` grouped by pool row, so that each pool
/// gradient row accumulates while it is in cache.
fn pool_order(index: &ContextIndex) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> = (0..index.rows)
        .flat_map(|r| (0..index.width).map(move |j| (r, j)))
        .collect();
    order.sort_by_key(|&(r, j)| index.row(r)[j]);
    order
}

/// `x^T M x` for a square row-major `M`.
fn quad_form(m: &[f64], x: &[f64]) -> f64 {
    let r = x.len();
    (0..r).map(|a| x[a] * dot(&m[a * r..(a + 1) * r], x)).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
