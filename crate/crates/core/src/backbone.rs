//! Feed-forward building blocks: input module, residual blocks, head, MLP.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{NumEmbedding, NumEmbeddingConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and bias uniform in `±1/sqrt(d_in)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_bound(store, name, d_in, d_out, bias, bound, rng)
    }

    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[d_out], bound)));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row_vector(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Residual block `x + Linear2(Dropout(ReLU(Linear1(LN(x)))))` with hidden width `2d`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm: Option<LayerNorm>,
    pub linear1: Linear,
    pub linear2: Linear,
    pub dropout: f64,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        norm: bool,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Block {
            norm: norm.then(|| LayerNorm::new(store, &format!("{name}.norm"), d)),
            linear1: Linear::new(store, &format!("{name}.linear1"), d, 2 * d, true, rng),
            linear2: Linear::new(store, &format!("{name}.linear2"), 2 * d, d, true, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(n) = &self.norm {
            h = n.forward(g, store, h)?;
        }
        let h = self.linear1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout)?;
        let h = self.linear2.forward(g, store, h)?;
        g.add(x, h)
    }
}

/// `LN -> ReLU -> Linear(d -> out)`.
#[derive(Clone, Debug)]
pub struct Head {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl Head {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            linear: Linear::new(store, &format!("{name}.linear"), d, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = g.relu(h);
        self.linear.forward(g, store, h)
    }
}

/// Numeric embeddings, concatenation with the other features, `Linear(-> d)`.
#[derive(Clone, Debug)]
pub struct InputModule {
    pub embedding: NumEmbedding,
    pub linear: Linear,
    pub p_num: usize,
    pub p_other: usize,
}

impl InputModule {
    pub fn new(
        store: &mut ParamStore,
        p_num: usize,
        p_other: usize,
        d: usize,
        emb: NumEmbeddingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let embedding = NumEmbedding::new(store, "num_embedding", p_num, emb, rng)?;
        let width = embedding.output_width() + p_other;
        if width == 0 {
            return Err(Error::Config("dataset has no features".into()));
        }
        let linear = Linear::new(store, "input", width, d, true, rng);
        Ok(InputModule {
            embedding,
            linear,
            p_num,
            p_other,
        })
    }

    /// True when the whole module is one affine map of the concatenated raw
    /// features, so downstream linear maps can be composed with it.
    pub fn is_affine(&self) -> bool {
        self.embedding.param_ids().is_empty()
    }

    /// Input of the final linear layer: `[emb(num) | other]`.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, num: Var, other: Var) -> Result<Var> {
        self.check(g, num, other)?;
        let e = self.embedding.forward(g, store, num)?;
        if self.p_other == 0 {
            Ok(e)
        } else if self.p_num == 0 {
            Ok(other)
        } else {
            g.concat_cols(&[e, other])
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, num: Var, other: Var) -> Result<Var> {
        let f = self.features(g, store, num, other)?;
        self.linear.forward(g, store, f)
    }

    fn check(&self, g: &Graph, num: Var, other: Var) -> Result<()> {
        let (a, b) = (g.value(num).shape(), g.value(other).shape());
        if a.len() != 2 || b.len() != 2 || a[1] != self.p_num || b[1] != self.p_other || a[0] != b[0] {
            return Err(Error::shape(
                "input_module",
                format!(
                    "got numeric {a:?} and other {b:?}, fitted for {} and {} columns",
                    self.p_num, self.p_other
                ),
            ));
        }
        Ok(())
    }
}

/// `N` residual blocks; the first block of an encoder has no LayerNorm.
#[derive(Clone, Debug)]
pub struct BlockStack {
    pub blocks: Vec<Block>,
}

impl BlockStack {
    pub fn encoder(store: &mut ParamStore, n: usize, d: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..n)
            .map(|i| Block::new(store, &format!("encoder.{i}"), d, i > 0, dropout, rng))
            .collect();
        BlockStack { blocks }
    }

    pub fn predictor(store: &mut ParamStore, n: usize, d: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..n)
            .map(|i| Block::new(store, &format!("predictor.{i}"), d, true, dropout, rng))
            .collect();
        BlockStack { blocks }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub n_layers: usize,
    pub width: usize,
    pub dropout: f64,
}

/// `[Linear -> ReLU -> Dropout] x L -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub head: Linear,
    pub dropout: f64,
    pub p_num: usize,
    pub p_other: usize,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        p_num: usize,
        p_other: usize,
        d_out: usize,
        cfg: &MlpConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d_in = p_num + p_other;
        if d_in == 0 {
            return Err(Error::Config("dataset has no features".into()));
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut width = d_in;
        for i in 0..cfg.n_layers {
            layers.push(Linear::new(store, &format!("mlp.{i}"), width, cfg.width, true, rng));
            width = cfg.width;
        }
        let head = Linear::new(store, "mlp.head", width, d_out, true, rng);
        Ok(Mlp {
            layers,
            head,
            dropout: cfg.dropout,
            p_num,
            p_other,
        })
    }

    /// `x` is the concatenated `[num | other]` feature matrix.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.p_num + self.p_other {
            return Err(Error::shape(
                "mlp",
                format!("input width {} vs {}", g.value(x).cols(), self.p_num + self.p_other),
            ));
        }
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, store, h)?;
            h = g.relu(h);
            h = g.dropout(h, self.dropout)?;
        }
        self.head.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingScheme;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut s = ParamStore::new();
        let m = InputModule::new(&mut s, 3, 2, 5, NumEmbeddingConfig::default(), &mut rng()).unwrap();
        zero(&mut s, m.linear.bias.unwrap());
        let mut g = Graph::eval();
        let num = g.constant(Tensor::zeros(&[1, 3]));
        let other = g.constant(Tensor::zeros(&[1, 2]));
        let y = m.forward(&mut g, &s, num, other).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 5]);
    }

    #[test]
    fn input_widths() {
        let mut s = ParamStore::new();
        let m = InputModule::new(&mut s, 8, 0, 265, NumEmbeddingConfig::default(), &mut rng()).unwrap();
        assert_eq!(m.linear.d_in, 8);
        let mut g = Graph::eval();
        let num = g.constant(Tensor::zeros(&[2, 8]));
        let other = g.constant(Tensor::zeros(&[2, 0]));
        let y = m.forward(&mut g, &s, num, other).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 265]);
        let bad = g.constant(Tensor::zeros(&[2, 7]));
        assert!(m.forward(&mut g, &s, bad, other).is_err());
    }

    #[test]
    fn empty_encoder_is_identity() {
        let mut s = ParamStore::new();
        let e = BlockStack::encoder(&mut s, 0, 4, 0.1, &mut rng());
        let mut g = Graph::eval();
        let x = g.constant(Tensor::full(&[2, 4], 0.7));
        let y = e.forward(&mut g, &s, x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_second_linear_gives_residual() {
        let mut s = ParamStore::new();
        let e = BlockStack::encoder(&mut s, 2, 4, 0.0, &mut rng());
        for b in &e.blocks {
            zero(&mut s, b.linear2.weight);
            zero(&mut s, b.linear2.bias.unwrap());
        }
        assert!(e.blocks[0].norm.is_none() && e.blocks[1].norm.is_some());
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let y = e.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn zero_head_gives_zero_prediction() {
        let mut s = ParamStore::new();
        let h = Head::new(&mut s, "head", 4, 9, &mut rng());
        zero(&mut s, h.linear.weight);
        zero(&mut s, h.linear.bias.unwrap());
        let mut g = Graph::eval();
        let x = g.constant(Tensor::full(&[3, 4], 0.2));
        let y = h.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 9]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_block_gradient() {
        let mut s = ParamStore::new();
        let e = BlockStack::encoder(&mut s, 1, 4, 0.3, &mut rng());
        let x = Tensor::new(vec![2, 4], vec![0.1, -0.4, 0.9, 1.3, -0.7, 0.2, 0.5, -1.1]).unwrap();
        let r = grad_check(
            &s,
            |g, s| {
                let mut e = e.clone();
                e.blocks[0].dropout = 0.0;
                let xv = g.constant(x.clone());
                let y = e.forward(g, s, xv)?;
                g.mse(y, &[0.5; 8])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mlp_eval_is_deterministic_and_checks_gradients() {
        let mut s = ParamStore::new();
        let cfg = MlpConfig {
            n_layers: 2,
            width: 6,
            dropout: 0.0,
        };
        let m = Mlp::new(&mut s, 3, 1, 2, &cfg, &mut rng()).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let run = || {
            let mut g = Graph::eval();
            let xv = g.constant(x.clone());
            let y = m.forward(&mut g, &s, xv).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
        let r = grad_check(
            &s,
            |g, s| {
                let xv = g.constant(x.clone());
                let y = m.forward(g, s, xv)?;
                g.cross_entropy(y, &[0, 1, 1])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn embedded_input_module_is_not_affine() {
        let mut s = ParamStore::new();
        let emb = NumEmbeddingConfig {
            scheme: EmbeddingScheme::PlrLite,
            ..NumEmbeddingConfig::default()
        };
        let m = InputModule::new(&mut s, 2, 1, 4, emb, &mut rng()).unwrap();
        assert!(!m.is_affine());
        assert_eq!(m.linear.d_in, 2 * 16 + 1);
    }
}
