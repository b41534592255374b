//! Optional embeddings for numeric features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::backbone::uniform;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingScheme {
    None,
    /// Per-feature linear map followed by ReLU.
    Lr,
    /// Periodic expansion, per-feature linear map, ReLU.
    Plr,
    /// Periodic expansion, linear map shared across features, ReLU.
    PlrLite,
}

impl std::str::FromStr for EmbeddingScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(EmbeddingScheme::None),
            "lr" => Ok(EmbeddingScheme::Lr),
            "plr" => Ok(EmbeddingScheme::Plr),
            "plr-lite" | "plr_lite" => Ok(EmbeddingScheme::PlrLite),
            _ => Err(Error::Config(format!("unknown embedding scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumEmbeddingConfig {
    pub scheme: EmbeddingScheme,
    pub d_emb: usize,
    pub n_frequencies: usize,
    pub frequency_scale: f64,
}

impl Default for NumEmbeddingConfig {
    fn default() -> Self {
        NumEmbeddingConfig {
            scheme: EmbeddingScheme::None,
            d_emb: 16,
            n_frequencies: 48,
            frequency_scale: 0.01,
        }
    }
}

impl NumEmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scheme == EmbeddingScheme::None {
            return Ok(());
        }
        if self.d_emb == 0 || self.n_frequencies == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        if self.frequency_scale.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("frequency scale must be positive".into()));
        }
        Ok(())
    }

    /// Width of the embedded numeric block for `p` features.
    pub fn output_width(&self, p: usize) -> usize {
        match self.scheme {
            EmbeddingScheme::None => p,
            _ => p * self.d_emb,
        }
    }
}

#[derive(Clone, Debug)]
enum Params {
    None,
    Lr {
        weight: ParamId,
        bias: ParamId,
    },
    Plr {
        freq: ParamId,
        weight: ParamId,
        bias: ParamId,
    },
    PlrLite {
        freq: ParamId,
        weight: ParamId,
        bias: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct NumEmbedding {
    cfg: NumEmbeddingConfig,
    p: usize,
    params: Params,
}

impl NumEmbedding {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        p: usize,
        cfg: NumEmbeddingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (e, k) = (cfg.d_emb, cfg.n_frequencies);
        let frequencies = |store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, cfg.frequency_scale).expect("positive scale");
            let data = (0..p * k).map(|_| rng.sample(normal)).collect();
            store.add(format!("{prefix}.frequencies"), Tensor::new(vec![p, k], data).expect("p x k"))
        };
        let params = match cfg.scheme {
            EmbeddingScheme::None => Params::None,
            EmbeddingScheme::Lr => Params::Lr {
                weight: store.add(format!("{prefix}.weight"), uniform(rng, &[p, 1, e], 1.0)),
                bias: store.add(format!("{prefix}.bias"), uniform(rng, &[p, e], 1.0)),
            },
            EmbeddingScheme::Plr => {
                let freq = frequencies(store, rng);
                let bound = 1.0 / ((2 * k) as f64).sqrt();
                Params::Plr {
                    freq,
                    weight: store.add(format!("{prefix}.weight"), uniform(rng, &[p, 2 * k, e], bound)),
                    bias: store.add(format!("{prefix}.bias"), uniform(rng, &[p, e], bound)),
                }
            }
            EmbeddingScheme::PlrLite => {
                let freq = frequencies(store, rng);
                let bound = 1.0 / ((2 * k) as f64).sqrt();
                Params::PlrLite {
                    freq,
                    weight: store.add(format!("{prefix}.weight"), uniform(rng, &[2 * k, e], bound)),
                    bias: store.add(format!("{prefix}.bias"), uniform(rng, &[e], bound)),
                }
            }
        };
        Ok(NumEmbedding { cfg, p, params })
    }

    pub fn config(&self) -> &NumEmbeddingConfig {
        &self.cfg
    }

    pub fn output_width(&self) -> usize {
        self.cfg.output_width(self.p)
    }

    /// Maps `x: [n, p]` to `[n, p * d_emb]`, or returns `x` for `None`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        match self.params {
            Params::None => Ok(x),
            Params::Lr { weight, bias } => {
                let (w, b) = (g.param(store, weight), g.param(store, bias));
                let z = g.feature_linear(x, w, b)?;
                Ok(g.relu(z))
            }
            Params::Plr { freq, weight, bias } => {
                let c = g.param(store, freq);
                let z = g.periodic(x, c)?;
                let (w, b) = (g.param(store, weight), g.param(store, bias));
                let z = g.feature_linear(z, w, b)?;
                Ok(g.relu(z))
            }
            Params::PlrLite { freq, weight, bias } => {
                let c = g.param(store, freq);
                let z = g.periodic(x, c)?;
                let z = g.reshape(z, &[n * self.p, 2 * self.cfg.n_frequencies])?;
                let (w, b) = (g.param(store, weight), g.param(store, bias));
                let z = g.matmul(z, w)?;
                let z = g.add_row_vector(z, b)?;
                let z = g.relu(z);
                g.reshape(z, &[n, self.p * self.cfg.d_emb])
            }
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.params {
            Params::None => vec![],
            Params::Lr { weight, bias } => vec![weight, bias],
            Params::Plr { freq, weight, bias } | Params::PlrLite { freq, weight, bias } => {
                vec![freq, weight, bias]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;

    fn cfg(scheme: EmbeddingScheme, d_emb: usize, k: usize) -> NumEmbeddingConfig {
        NumEmbeddingConfig {
            scheme,
            d_emb,
            n_frequencies: k,
            frequency_scale: 0.5,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn none_is_identity() {
        let mut s = ParamStore::new();
        let e = NumEmbedding::new(&mut s, "emb", 3, cfg(EmbeddingScheme::None, 4, 2), &mut rng()).unwrap();
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = e.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 0.5]);
        assert_eq!(e.output_width(), 3);
    }

    #[test]
    fn lr_relu_clips_negative() {
        let mut s = ParamStore::new();
        let e = NumEmbedding::new(&mut s, "emb", 1, cfg(EmbeddingScheme::Lr, 1, 1), &mut rng()).unwrap();
        s.get_mut(e.param_ids()[0]).data_mut()[0] = 1.0;
        s.get_mut(e.param_ids()[1]).data_mut()[0] = 0.0;
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 1], vec![-2.0]).unwrap());
        let y = e.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn periodic_stage_at_zero() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let c = g.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 7.0, 2.0, 0.1, -4.0]).unwrap());
        let z = g.periodic(x, c).unwrap();
        // per feature: three cos terms then three sin terms
        assert_eq!(g.value(z).data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn output_widths() {
        for scheme in [EmbeddingScheme::Lr, EmbeddingScheme::Plr, EmbeddingScheme::PlrLite] {
            let mut s = ParamStore::new();
            let e = NumEmbedding::new(&mut s, "emb", 5, cfg(scheme, 4, 3), &mut rng()).unwrap();
            let mut g = Graph::eval();
            let x = g.constant(Tensor::full(&[2, 5], 0.3));
            let y = e.forward(&mut g, &s, x).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 20]);
        }
    }

    #[test]
    fn plr_and_lite_coincide_for_one_feature() {
        let mut s1 = ParamStore::new();
        let plr = NumEmbedding::new(&mut s1, "a", 1, cfg(EmbeddingScheme::Plr, 3, 2), &mut rng()).unwrap();
        let mut s2 = ParamStore::new();
        let lite = NumEmbedding::new(&mut s2, "b", 1, cfg(EmbeddingScheme::PlrLite, 3, 2), &mut rng()).unwrap();
        for (a, b) in plr.param_ids().into_iter().zip(lite.param_ids()) {
            let src = s1.get(a).data().to_vec();
            s2.get_mut(b).data_mut().copy_from_slice(&src);
        }
        let x = Tensor::new(vec![4, 1], vec![-1.0, 0.2, 0.7, 3.0]).unwrap();
        let mut g1 = Graph::eval();
        let x1 = g1.constant(x.clone());
        let y1 = plr.forward(&mut g1, &s1, x1).unwrap();
        let mut g2 = Graph::eval();
        let x2 = g2.constant(x);
        let y2 = lite.forward(&mut g2, &s2, x2).unwrap();
        // equal up to summation order inside the matrix product
        for (a, b) in g1.value(y1).data().iter().zip(g2.value(y2).data()) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for scheme in [EmbeddingScheme::Lr, EmbeddingScheme::Plr, EmbeddingScheme::PlrLite] {
            let mut s = ParamStore::new();
            let e = NumEmbedding::new(&mut s, "emb", 3, cfg(scheme, 4, 3), &mut rng()).unwrap();
            let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4]).unwrap();
            let r = grad_check(
                &s,
                |g, s| {
                    let xv = g.constant(x.clone());
                    let y = e.forward(g, s, xv)?;
                    let sq = g.mse(y, &[0.2; 24])?;
                    Ok(sq)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{scheme:?}: {r:?}");
        }
    }
}
