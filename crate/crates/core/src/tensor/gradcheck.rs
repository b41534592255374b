use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::sync::Arc;

use rand::Rng;

use super::graph::{ContextIndex, Graph, Var};
use super::params::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter, chosen at random.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss on the supplied graph from the supplied store.
/// The graph is in grad-check mode, so any active dropout inside `f` fails.
pub fn grad_check<F>(store: &ParamStore, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if opts.eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("grad check eps must be positive, got {}", opts.eps)));
    }
    let mut g = Graph::grad_check();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss, store)?;
    drop(g);

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::grad_check();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coords_checked: 0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;

            let analytic = grads.get(id).data()[j];
            let numeric = (plus - minus) / (2.0 * opts.eps);
            if !analytic.is_finite() || !numeric.is_finite() {
                return Err(Error::GradCheck(format!(
                    "non-finite gradient for parameter {} ({}) at index {j}: analytic {analytic}, numeric {numeric}",
                    id.index(),
                    store.name(id)
                )));
            }
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}


pub type LossFn = Box<dyn FnMut(&mut Graph, &ParamStore) -> Result<Var>>;

/// Names of the primitives covered by [`primitive_loss`], by kind.
pub const PRIMITIVES: [&str; 24] = [
    "matmul",
    "add_row_vector",
    "add",
    "sub",
    "scale",
    "relu",
    "layer_norm",
    "softmax",
    "gather_rows",
    "concat_rows",
    "concat_cols",
    "pairwise_sq_dist",
    "context_sq_dist",
    "context_dot",
    "context_weighted_sum",
    "context_ffn_sum",
    "periodic",
    "feature_linear",
    "mse",
    "cross_entropy",
    "binary_cross_entropy",
    "mean",
    "transpose",
    "context_quad_dist",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Builds a loss exercising primitive `kind` (see [`PRIMITIVES`]) on random
/// inputs.
pub fn primitive_loss(kind: usize, seed: u64) -> (ParamStore, LossFn) {
    assert!(kind < PRIMITIVES.len(), "no primitive {kind}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let a = s.add("a", rand_tensor(&mut rng, &[3, 4]));
    let b = s.add("b", rand_tensor(&mut rng, &[4, 2]));
    let c = s.add("c", rand_tensor(&mut rng, &[3, 4]));
    let v = s.add("v", rand_tensor(&mut rng, &[4]));
    let pool = s.add("pool", rand_tensor(&mut rng, &[5, 4]));
    let w = s.add("w", rand_tensor(&mut rng, &[3, 2]));
    let feat_w = s.add("fw", rand_tensor(&mut rng, &[2, 2, 3]));
    let feat_b = s.add("fb", rand_tensor(&mut rng, &[2, 3]));
    let proj = rand_tensor(&mut rng, &[3, 4]);
    let idx = Arc::new(ContextIndex::new(3, 2, vec![0, 4, 1, 1, 3, 2]).unwrap());
    let labels = [1usize, 0, 3];
    let bin: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
    let targets: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
    let f = move |g: &mut Graph, s: &ParamStore| -> Result<Var> {
        let (av, bv, cv) = (g.param(s, a), g.param(s, b), g.param(s, c));
        let vv = g.param(s, v);
        let pv = g.param(s, pool);
        let wv = g.param(s, w);
        let pr = g.constant(proj.clone());
        let out = match kind {
            0 => g.matmul(av, bv)?,
            1 => g.add_row_vector(av, vv)?,
            2 => g.add(av, cv)?,
            3 => g.sub(av, cv)?,
            4 => g.scale(av, -1.7),
            5 => {
                let sh = g.scale(av, 1.0);
                g.relu(sh)
            }
            6 => {
                let gain = g.param(s, v);
                g.layer_norm(av, gain, vv)?
            }
            7 => g.softmax(av)?,
            8 => g.gather_rows(pv, &[4, 0, 4])?,
            9 => g.concat_rows(&[av, cv])?,
            10 => g.concat_cols(&[av, cv])?,
            11 => g.pairwise_sq_dist(av, pv)?,
            12 => g.context_sq_dist(av, pv, &idx)?,
            13 => g.context_dot(av, pv, &idx)?,
            14 => g.context_weighted_sum(wv, pv, &idx)?,
            15 => g.context_ffn_sum(av, pv, wv, &idx, 0.0)?,
            16 => {
                let x = g.reshape(wv, &[3, 2])?;
                let fr = g.reshape(bv, &[2, 4])?;
                g.periodic(x, fr)?
            }
            17 => {
                let x = g.reshape(av, &[3, 4])?;
                let (fw, fb) = (g.param(s, feat_w), g.param(s, feat_b));
                g.feature_linear(x, fw, fb)?
            }
            18 => return g.mse(av, &targets),
            19 => return g.cross_entropy(av, &labels),
            20 => {
                let r = g.reshape(av, &[12, 1])?;
                return g.binary_cross_entropy(r, &bin);
            }
            21 => {
                let m = g.mean(av);
                return Ok(m);
            }
            22 => g.transpose(av)?,
            23 => g.context_quad_dist(av, pv, bv, &idx)?,
            _ => unreachable!(),
        };
        // random projection so every output coordinate carries weight
        let n = g.value(out).len();
        let flat = g.reshape(out, &[1, n])?;
        let pw: Vec<f64> = (0..n).map(|i| g.value(pr).data()[i % 12] + 0.3).collect();
        let pc = g.constant(Tensor::new(vec![n, 1], pw)?);
        let y = g.matmul(flat, pc)?;
        Ok(g.sum(y))
    };
    (s, Box::new(f))
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![1], vec![3.0]).unwrap());
        let r = grad_check(
            &s,
            |g, s| {
                let w = g.param(s, s.ids().next().unwrap());
                let a = g.reshape(w, &[1, 1])?;
                let sq = g.matmul(a, a)?;
                Ok(g.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn active_dropout_is_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[2, 2], 1.0));
        let r = grad_check(
            &s,
            |g, s| {
                let w = g.param(s, s.ids().next().unwrap());
                let d = g.dropout(w, 0.2)?;
                Ok(g.sum(d))
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::GradCheck(_))));
    }

    #[test]
    fn nan_reports_the_parameter() {
        let mut s = ParamStore::new();
        s.add("bad", Tensor::full(&[1, 1], f64::NAN));
        let err = grad_check(
            &s,
            |g, s| {
                let w = g.param(s, s.ids().next().unwrap());
                Ok(g.sum(w))
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn random_three_layer_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let dims = [5, 7, 6, 3];
        let mut layers = Vec::new();
        for i in 0..3 {
            let w = s.add(format!("w{i}"), rand_tensor(&mut rng, &[dims[i], dims[i + 1]]));
            let b = s.add(format!("b{i}"), rand_tensor(&mut rng, &[dims[i + 1]]));
            layers.push((w, b));
        }
        let gain = s.add("ln.g", rand_tensor(&mut rng, &[7]));
        let bias = s.add("ln.b", rand_tensor(&mut rng, &[7]));
        let x = rand_tensor(&mut rng, &[4, 5]);
        let y = [0usize, 2, 1, 2];
        let r = grad_check(
            &s,
            |g, s| {
                let mut h = g.constant(x.clone());
                for (i, &(w, b)) in layers.iter().enumerate() {
                    let wv = g.param(s, w);
                    let bv = g.param(s, b);
                    let z = g.matmul(h, wv)?;
                    h = g.add_row_vector(z, bv)?;
                    if i == 0 {
                        let gv = g.param(s, gain);
                        let bb = g.param(s, bias);
                        h = g.layer_norm(h, gv, bb)?;
                    }
                    if i < 2 {
                        h = g.relu(h);
                    }
                }
                g.cross_entropy(h, &y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }


    #[test]
    fn every_primitive_matches_finite_differences() {
        for kind in 0..PRIMITIVES.len() {
            let (s, f) = primitive_loss(kind, 3);
            let r = grad_check(&s, f, &GradCheckOptions::default()).unwrap();
            assert!(r.max_rel_error < 1e-4, "primitive {kind}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn primitives_match_finite_differences_at_random_points(seed in any::<u64>(), kind in 0..PRIMITIVES.len()) {
            let (s, f) = primitive_loss(kind, seed);
            let r = grad_check(&s, f, &GradCheckOptions::default()).unwrap();
            prop_assert!(r.max_rel_error < 1e-4, "primitive {}: {:?}", kind, r);
        }

        #[test]
        fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::eval();
            let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
            let y = g.softmax(x).unwrap();
            for r in 0..3 {
                let row = g.value(y).row(r);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn layer_norm_rows_are_standardized(vals in proptest::collection::vec(-10.0f64..10.0, 16)) {
            let mut g = Graph::eval();
            let x = g.constant(Tensor::new(vec![2, 8], vals.clone()).unwrap());
            let gain = g.constant(Tensor::full(&[8], 1.0));
            let bias = g.constant(Tensor::zeros(&[8]));
            let y = g.layer_norm(x, gain, bias).unwrap();
            for r in 0..2 {
                let raw = &vals[r * 8..(r + 1) * 8];
                let m = raw.iter().sum::<f64>() / 8.0;
                let var = raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
                let row = g.value(y).row(r);
                let mean = row.iter().sum::<f64>() / 8.0;
                let v = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
                prop_assert!(mean.abs() < 1e-6);
                // the epsilon shrinks the variance of low-spread rows
                let expected = var / (var + crate::tensor::graph::LAYER_NORM_EPS);
                prop_assert!((v - expected).abs() < 1e-6);
                if var > 1e-2 {
                    prop_assert!((v - 1.0).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_dropout() {
        let run = || {
            let mut g = Graph::train(ChaCha8Rng::seed_from_u64(5));
            let x = g.constant(Tensor::full(&[8, 8], 1.0));
            let y = g.dropout(x, 0.4).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
