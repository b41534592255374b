//! Full models: TabR (input module, encoder, retrieval, predictor) and the
//! plain MLP baseline.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BlockStack, Head, InputModule, Mlp, MlpConfig};
use crate::data::{Features, Task};
use crate::embeddings::NumEmbeddingConfig;
use crate::error::{Error, Result};
use crate::retrieval::{rank, Pool, PoolTensors, Queries, RetrievalConfig, RetrievalModule, Rows};
use crate::rng::stream;
use crate::tensor::{ContextIndex, Graph, ParamStore, Tensor, Var};

/// Rows per forward pass at inference.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabrConfig {
    pub d: usize,
    pub n_encoder: usize,
    pub n_predictor: usize,
    /// Dropout inside blocks and inside `T`.
    pub dropout: f64,
    pub embedding: NumEmbeddingConfig,
    pub retrieval: RetrievalConfig,
    /// Bound of the uniform init of the label encoder; `1/sqrt(d)` when unset.
    pub label_init: Option<f64>,
}

impl TabrConfig {
    /// The simple default configuration: linear encoder, one predictor
    /// block, no numeric embeddings.
    pub fn tabr_s() -> Self {
        TabrConfig {
            d: 265,
            n_encoder: 0,
            n_predictor: 1,
            dropout: 0.38852797479169876,
            embedding: NumEmbeddingConfig::default(),
            retrieval: RetrievalConfig::step(4, 0.38920071545944357).expect("step 4 exists"),
            label_init: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.n_predictor == 0 {
            return Err(Error::Config("at least one predictor block is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if let Some(b) = self.label_init {
            if b.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Config("label init bound must be positive".into()));
            }
        }
        self.embedding.validate()?;
        self.retrieval.validate()
    }
}

/// Attention of one target object over its context.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextRecord {
    /// Candidate ids, best first.
    pub indices: Vec<usize>,
    /// Softmax weights aligned with `indices`.
    pub weights: Vec<f64>,
    /// Weight on the object itself when it is included in its own context.
    pub self_weight: f64,
}

pub struct TabrOutput {
    pub logits: Var,
    pub weights: Var,
    /// Context lists in pool coordinates, without the self entry.
    pub contexts: Vec<Vec<usize>>,
}

/// How a training batch gets its context.
pub enum Context<'a> {
    /// Scan all candidates; `exclude[b]` is the target's own position.
    Search {
        candidates: &'a Features,
        labels: &'a [f64],
        exclude: &'a [Option<usize>],
    },
    /// Precomputed lists into `candidates`.
    Fixed {
        candidates: &'a Features,
        labels: &'a [f64],
        index: Arc<ContextIndex>,
    },
}

#[derive(Clone, Debug)]
pub struct Tabr {
    pub cfg: TabrConfig,
    pub task: Task,
    pub params: ParamStore,
    pub input: InputModule,
    pub encoder: BlockStack,
    pub retrieval: RetrievalModule,
    pub predictor: BlockStack,
    pub head: Head,
    /// Keep linear encodings in factored form; off only to cross-check the
    /// dense path.
    pub factored: bool,
}

/// Sorted distinct ids used by `lists`, and the lists rewritten as
/// positions into that set.
fn compact(lists: &[Vec<usize>]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut used: Vec<usize> = lists.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let pos: HashMap<usize, usize> = used.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let local = lists.iter().map(|l| l.iter().map(|i| pos[i]).collect()).collect();
    (used, local)
}

/// Cuts ragged lists (possible only with fewer candidates than `m`) to a
/// common width.
fn uniform_width(mut lists: Vec<Vec<usize>>, m: usize) -> Vec<Vec<usize>> {
    let width = lists.iter().map(Vec::len).min().unwrap_or(0);
    if width < m {
        log::warn!("only {width} candidates available for a context of {m}");
    }
    for l in &mut lists {
        l.truncate(width);
    }
    lists
}

impl Tabr {
    pub fn new(cfg: TabrConfig, task: Task, p_num: usize, p_other: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, "init", &[]);
        let mut params = ParamStore::new();
        let d = cfg.d;
        let input = InputModule::new(&mut params, p_num, p_other, d, cfg.embedding, &mut rng)?;
        let encoder = BlockStack::encoder(&mut params, cfg.n_encoder, d, cfg.dropout, &mut rng);
        let label_init = cfg.label_init.unwrap_or(1.0 / (d as f64).sqrt());
        let retrieval = RetrievalModule::new(
            &mut params,
            d,
            cfg.n_encoder > 0,
            task,
            cfg.retrieval.clone(),
            cfg.dropout,
            label_init,
            &mut rng,
        )?;
        let predictor = BlockStack::predictor(&mut params, cfg.n_predictor, d, cfg.dropout, &mut rng);
        let head = Head::new(&mut params, "head", d, task.n_outputs(), &mut rng);
        Ok(Tabr {
            cfg,
            task,
            params,
            input,
            encoder,
            retrieval,
            predictor,
            head,
            factored: true,
        })
    }

    /// Hash of the parameter values; encodings are tagged with it.
    pub fn version(&self) -> String {
        parameter_version(&self.params)
    }

    /// Encoder output `x̃` for feature rows; kept affine while possible.
    pub fn encode(&self, g: &mut Graph, feats: &Features) -> Result<Rows> {
        let num = g.constant(feats.num.clone());
        let other = g.constant(feats.other.clone());
        let f = self.input.features(g, &self.params, num, other)?;
        if self.factored && self.input.is_affine() && self.encoder.is_empty() {
            let w = g.param(&self.params, self.input.linear.weight);
            let b = match self.input.linear.bias {
                Some(b) => g.param(&self.params, b),
                None => g.constant(Tensor::zeros(&[self.cfg.d])),
            };
            return Ok(Rows::Affine { x: f, w, b });
        }
        let v = self.input.linear.forward(g, &self.params, f)?;
        Ok(Rows::Dense(self.encoder.forward(g, &self.params, v)?))
    }

    /// Keys, values and `T` inputs for labeled candidates.
    pub fn candidate_pool(&self, g: &mut Graph, feats: &Features, labels: &[f64]) -> Result<Pool> {
        if feats.rows() == 0 {
            return Err(Error::Config("empty candidate set".into()));
        }
        let rows = self.encode(g, feats)?;
        self.retrieval.pool(g, &self.params, rows, Some(labels))
    }

    /// Target representation, its dense form and its queries.
    pub fn targets(&self, g: &mut Graph, feats: &Features) -> Result<(Rows, Var, Queries)> {
        let rows = self.encode(g, feats)?;
        let x = rows.materialize(g)?;
        let q = self.retrieval.queries(g, &self.params, rows)?;
        Ok((rows, x, q))
    }

    /// Retrieval over the given context lists (positions into `pool`), then
    /// predictor and head. Appends the target itself to every context when
    /// configured.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        g: &mut Graph,
        rows: Rows,
        x: Var,
        q: &Queries,
        pool: &Pool,
        lists: Vec<Vec<usize>>,
        remove: Option<&[f64]>,
    ) -> Result<TabrOutput> {
        let b = lists.len();
        let (pool, index) = if self.cfg.retrieval.include_self {
            let n = pool.rows(g);
            let own = self.retrieval.pool(g, &self.params, rows, None)?;
            let merged = Pool::concat(g, pool, &own)?;
            let with_self: Vec<Vec<usize>> = lists
                .iter()
                .enumerate()
                .map(|(r, l)| {
                    let mut l = l.clone();
                    l.push(n + r);
                    l
                })
                .collect();
            (merged, ContextIndex::from_lists(&with_self)?)
        } else {
            (*pool, ContextIndex::from_lists(&lists)?)
        };
        if index.rows() != b || index.width() == 0 {
            return Err(Error::Config("every target needs a non-empty context".into()));
        }
        let index = Arc::new(index);
        let out = self
            .retrieval
            .forward_removing(g, &self.params, x, q, &pool, &index, remove)?;
        let h = self.predictor.forward(g, &self.params, out.output)?;
        let logits = self.head.forward(g, &self.params, h)?;
        Ok(TabrOutput {
            logits,
            weights: out.weights,
            contexts: lists,
        })
    }

    /// Training-time forward pass for a batch of targets. With factored
    /// keys the search needs only the raw inputs, so the pool is built for
    /// the retrieved rows alone.
    pub fn forward(&self, g: &mut Graph, targets: &Features, ctx: Context<'_>) -> Result<TabrOutput> {
        let (rows, x, q) = self.targets(g, targets)?;
        match ctx {
            Context::Search {
                candidates,
                labels,
                exclude,
            } => {
                if exclude.len() != targets.rows() {
                    return Err(Error::shape("tabr_forward", "one exclusion entry per target"));
                }
                if candidates.rows() == 0 {
                    return Err(Error::Config("empty candidate set".into()));
                }
                let cfg = &self.cfg.retrieval;
                match self.encode(g, candidates)? {
                    Rows::Affine { x: cx, w, b } => {
                        let a = q.key_map.map(|a| g.value(a));
                        let lists = rank(cfg.similarity, g.value(q.search), g.value(cx), a, cfg.m, exclude);
                        let lists = uniform_width(lists, cfg.m);
                        let (used, local) = compact(&lists);
                        let sub = g.gather_rows(cx, &used)?;
                        let y: Vec<f64> = used.iter().map(|&i| labels[i]).collect();
                        let pool = self.retrieval.pool(g, &self.params, Rows::Affine { x: sub, w, b }, Some(&y))?;
                        let mut out = self.attend(g, rows, x, &q, &pool, local, None)?;
                        out.contexts = lists;
                        Ok(out)
                    }
                    dense => {
                        let pool = self.retrieval.pool(g, &self.params, dense, Some(labels))?;
                        let lists = rank(cfg.similarity, g.value(q.search), g.value(pool.keys), None, cfg.m, exclude);
                        let lists = uniform_width(lists, cfg.m);
                        self.attend(g, rows, x, &q, &pool, lists, None)
                    }
                }
            }
            Context::Fixed {
                candidates,
                labels,
                index,
            } => {
                let pool = self.candidate_pool(g, candidates, labels)?;
                let lists = (0..index.rows()).map(|r| index.row(r).to_vec()).collect();
                self.attend(g, rows, x, &q, &pool, lists, None)
            }
        }
    }

    /// Eval-mode encoding of labeled candidates.
    pub fn encode_candidates(&self, feats: &Features, labels: &[f64]) -> Result<PoolTensors> {
        if feats.rows() == 0 {
            return Err(Error::Config("empty candidate set".into()));
        }
        if labels.len() != feats.rows() {
            return Err(Error::shape("encode_candidates", "one label per candidate row"));
        }
        let mut out: Option<PoolTensors> = None;
        for start in (0..feats.rows()).step_by(EVAL_CHUNK * 4) {
            let end = (start + EVAL_CHUNK * 4).min(feats.rows());
            let rows: Vec<usize> = (start..end).collect();
            let mut g = Graph::eval();
            let pool = self.candidate_pool(&mut g, &feats.select(&rows), &labels[start..end])?;
            let t = pool.tensors(&g);
            match &mut out {
                None => out = Some(t),
                Some(acc) => acc.append(&t)?,
            }
        }
        Ok(out.expect("at least one chunk"))
    }

    /// Eval-mode predictions against an encoded candidate pool. Returns raw
    /// outputs `[n, n_outputs]` and each object's context.
    pub fn predict(
        &self,
        feats: &Features,
        pool: &PoolTensors,
        exclude: &[Option<usize>],
        remove: Option<&[f64]>,
    ) -> Result<(Tensor, Vec<ContextRecord>)> {
        if exclude.len() != feats.rows() {
            return Err(Error::shape("predict", "one exclusion entry per row"));
        }
        let n_out = self.task.n_outputs();
        let mut outputs = Vec::with_capacity(feats.rows() * n_out);
        let mut records = Vec::with_capacity(feats.rows());
        let cfg = &self.cfg.retrieval;
        for start in (0..feats.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(feats.rows());
            let rows: Vec<usize> = (start..end).collect();
            let mut g = Graph::eval();
            let (t_rows, x, q) = self.targets(&mut g, &feats.select(&rows))?;
            if q.key_map.is_some() != pool.key_map.is_some() {
                return Err(Error::Config("candidate encodings do not match the model's key form".into()));
            }
            let lists = pool.rank(cfg.similarity, g.value(q.search), cfg.m, &exclude[start..end]);
            let lists = uniform_width(lists, cfg.m);
            // compact pool of the rows this chunk actually uses
            let (used, local) = compact(&lists);
            let compact = pool.gather(&used).insert(&mut g);
            let out = self.attend(&mut g, t_rows, x, &q, &compact, local, remove)?;
            outputs.extend_from_slice(g.value(out.logits).data());
            let w = g.value(out.weights);
            let width = w.cols();
            for (r, l) in lists.into_iter().enumerate() {
                let row = w.row(r);
                records.push(ContextRecord {
                    weights: row[..l.len()].to_vec(),
                    self_weight: if width > l.len() { row[l.len()] } else { 0.0 },
                    indices: l,
                });
            }
        }
        Ok((Tensor::new(vec![feats.rows(), n_out], outputs)?, records))
    }
}

pub fn parameter_version(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in params.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// The MLP baseline with its parameters.
#[derive(Clone, Debug)]
pub struct MlpModel {
    pub cfg: MlpConfig,
    pub task: Task,
    pub params: ParamStore,
    pub mlp: Mlp,
}

impl MlpModel {
    pub fn new(cfg: MlpConfig, task: Task, p_num: usize, p_other: usize, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if cfg.width == 0 {
            return Err(Error::Config("MLP width must be positive".into()));
        }
        let mut rng = stream(seed, "init", &[]);
        let mut params = ParamStore::new();
        let mlp = Mlp::new(&mut params, p_num, p_other, task.n_outputs(), &cfg, &mut rng)?;
        Ok(MlpModel {
            cfg,
            task,
            params,
            mlp,
        })
    }

    pub fn forward(&self, g: &mut Graph, feats: &Features) -> Result<Var> {
        let x = g.constant(feats.concat());
        self.mlp.forward(g, &self.params, x)
    }

    pub fn predict(&self, feats: &Features) -> Result<Tensor> {
        let n_out = self.task.n_outputs();
        let mut outputs = Vec::with_capacity(feats.rows() * n_out);
        for start in (0..feats.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(feats.rows());
            let rows: Vec<usize> = (start..end).collect();
            let mut g = Graph::eval();
            let y = self.forward(&mut g, &feats.select(&rows))?;
            outputs.extend_from_slice(g.value(y).data());
        }
        Tensor::new(vec![feats.rows(), n_out], outputs)
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Tabr(Box<Tabr>),
    Mlp(MlpModel),
}

impl Model {
    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Tabr(m) => &m.params,
            Model::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Tabr(m) => &mut m.params,
            Model::Mlp(m) => &mut m.params,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Model::Tabr(m) => m.task,
            Model::Mlp(m) => m.task,
        }
    }
}
