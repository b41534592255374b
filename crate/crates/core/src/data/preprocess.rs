use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{Dataset, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_QUANTILES: usize = 1000;
const CDF_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NumPolicy {
    Quantile,
    Standardize,
    None,
}

impl std::str::FromStr for NumPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quantile" => Ok(NumPolicy::Quantile),
            "standardize" => Ok(NumPolicy::Standardize),
            "none" => Ok(NumPolicy::None),
            _ => Err(Error::Config(format!("unknown numeric policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum NumColumn {
    /// Reference quantile values at equally spaced probabilities in [0, 1].
    Quantile { quantiles: Vec<f64> },
    Standardize { mean: f64, std: f64 },
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn encode(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn decode(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Transformed model inputs: numeric block (the part embeddings act on) and
/// the remaining binary plus one-hot block.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub num: Tensor,
    pub other: Tensor,
}

impl Features {
    pub fn rows(&self) -> usize {
        self.num.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.num.shape()[1] + self.other.shape()[1]
    }

    /// `[num | other]` as one matrix.
    pub fn concat(&self) -> Tensor {
        let (n, a, b) = (self.rows(), self.num.shape()[1], self.other.shape()[1]);
        let mut data = Vec::with_capacity(n * (a + b));
        for r in 0..n {
            data.extend_from_slice(self.num.row(r));
            data.extend_from_slice(self.other.row(r));
        }
        Tensor::new(vec![n, a + b], data).expect("consistent widths")
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        Features {
            num: self.num.gather_rows(rows),
            other: self.other.gather_rows(rows),
        }
    }
}

/// Statistics fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    task: Task,
    num: Vec<NumColumn>,
    /// Per categorical column: the sorted codes seen during fitting.
    cat_seen: Vec<Vec<usize>>,
    target: Option<TargetScaler>,
}

impl Preprocessor {
    /// Fits on the dataset's training split.
    pub fn fit(ds: &Dataset, policies: &[NumPolicy]) -> Result<Self> {
        Self::fit_rows(ds, &ds.splits.train, policies)
    }

    /// Fits on an explicit subset of rows, which must all be training rows.
    pub fn fit_rows(ds: &Dataset, rows: &[usize], policies: &[NumPolicy]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("cannot fit preprocessing on zero rows".into()));
        }
        if policies.len() != ds.p_num() {
            return Err(Error::Config(format!(
                "{} numeric policies for {} numeric columns",
                policies.len(),
                ds.p_num()
            )));
        }
        let p = ds.p_num();
        let mut num = Vec::with_capacity(p);
        for (j, policy) in policies.iter().enumerate() {
            let col: Vec<f64> = rows.iter().map(|&i| ds.x_num.data()[i * p + j]).collect();
            num.push(match policy {
                NumPolicy::Quantile => NumColumn::Quantile {
                    quantiles: fit_quantiles(col),
                },
                NumPolicy::Standardize => {
                    let (mean, mut std) = mean_std(&col);
                    if std == 0.0 {
                        log::warn!("numeric column {j} is constant on the training rows; using std 1");
                        std = 1.0;
                    }
                    NumColumn::Standardize { mean, std }
                }
                NumPolicy::None => NumColumn::Identity,
            });
        }
        let pc = ds.p_cat();
        let cat_seen = (0..pc)
            .map(|j| {
                let mut seen = vec![false; ds.cat_cardinalities[j]];
                for &i in rows {
                    seen[ds.x_cat[i * pc + j]] = true;
                }
                (0..seen.len()).filter(|&c| seen[c]).collect()
            })
            .collect();
        let target = ds.task.is_regression().then(|| {
            let y: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
            let (mean, std) = mean_std(&y);
            TargetScaler {
                mean,
                std: if std == 0.0 { 1.0 } else { std },
            }
        });
        Ok(Preprocessor {
            task: ds.task,
            num,
            cat_seen,
            target,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn target_scaler(&self) -> Option<&TargetScaler> {
        self.target.as_ref()
    }

    pub fn num_width(&self) -> usize {
        self.num.len()
    }

    pub fn other_width(&self, ds: &Dataset) -> usize {
        ds.p_bin() + self.cat_seen.iter().map(Vec::len).sum::<usize>()
    }

    /// Transforms one raw numeric value of column `j`.
    pub fn transform_value(&self, j: usize, x: f64) -> Result<f64> {
        if x.is_nan() {
            return Err(Error::NonFinite(format!("NaN in numeric column {j}")));
        }
        Ok(match &self.num[j] {
            NumColumn::Quantile { quantiles } => quantile_to_normal(quantiles, x),
            NumColumn::Standardize { mean, std } => (x - mean) / std,
            NumColumn::Identity => x,
        })
    }

    pub fn transform(&self, ds: &Dataset, rows: &[usize]) -> Result<Features> {
        let p = ds.p_num();
        if p != self.num.len() || ds.p_cat() != self.cat_seen.len() {
            return Err(Error::Config("dataset layout does not match the fitted preprocessor".into()));
        }
        let mut num = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            for j in 0..p {
                num.push(self.transform_value(j, ds.x_num.data()[i * p + j])?);
            }
        }
        let ow = self.other_width(ds);
        let pb = ds.p_bin();
        let mut other = vec![0.0; rows.len() * ow];
        let mut unseen = 0usize;
        for (r, &i) in rows.iter().enumerate() {
            let o = &mut other[r * ow..(r + 1) * ow];
            o[..pb].copy_from_slice(ds.x_bin.row(i));
            let mut offset = pb;
            for (j, seen) in self.cat_seen.iter().enumerate() {
                match seen.binary_search(&ds.cat_row(i)[j]) {
                    Ok(pos) => o[offset + pos] = 1.0,
                    Err(_) => unseen += 1,
                }
                offset += seen.len();
            }
        }
        if unseen > 0 {
            log::warn!("{unseen} categorical values unseen during fitting were encoded as all zeros");
        }
        Ok(Features {
            num: Tensor::new(vec![rows.len(), p], num)?,
            other: Tensor::new(vec![rows.len(), ow], other)?,
        })
    }

    /// Training-space labels: standardized targets or class indices.
    pub fn labels(&self, ds: &Dataset, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&i| match &self.target {
                Some(t) => t.encode(ds.y[i]),
                None => ds.y[i],
            })
            .collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Empirical quantiles at `min(1000, n)` equally spaced probabilities with
/// linear interpolation between order statistics.
fn fit_quantiles(mut col: Vec<f64>) -> Vec<f64> {
    col.sort_by(f64::total_cmp);
    let n = col.len();
    let k = n.min(MAX_QUANTILES);
    let mut q: Vec<f64> = (0..k)
        .map(|i| {
            let prob = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
            let pos = prob * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            col[lo] + (pos - lo as f64) * (col[hi] - col[lo])
        })
        .collect();
    // guard against rounding making the sequence decrease
    for i in 1..q.len() {
        if q[i] < q[i - 1] {
            q[i] = q[i - 1];
        }
    }
    q
}

/// Empirical CDF of `x` by linear interpolation between reference quantiles.
/// Averages the right- and left-continuous versions so that a run of tied
/// reference values maps to the middle of its probability range.
fn interpolated_cdf(q: &[f64], x: f64) -> f64 {
    let last = q.len() - 1;
    let seg = |j: usize| (j as f64 + (x - q[j]) / (q[j + 1] - q[j])) / last as f64;
    let right = if x < q[0] {
        0.0
    } else if x >= q[last] {
        1.0
    } else {
        seg(q.partition_point(|&v| v <= x) - 1)
    };
    let left = if x <= q[0] {
        0.0
    } else if x > q[last] {
        1.0
    } else {
        let i = q.partition_point(|&v| v < x);
        if q[i] == x {
            i as f64 / last as f64
        } else {
            seg(i - 1)
        }
    };
    0.5 * (left + right)
}

fn quantile_to_normal(quantiles: &[f64], x: f64) -> f64 {
    let k = quantiles.len();
    if k == 1 || quantiles[0] == quantiles[k - 1] {
        return 0.0;
    }
    let cdf = interpolated_cdf(quantiles, x).clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
    standard_normal().inverse_cdf(cdf)
}

fn standard_normal() -> Normal {
    Normal::standard()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Splits;
    use proptest::prelude::*;

    fn column_dataset(values: Vec<f64>, train: usize) -> Dataset {
        let n = values.len();
        let rest: Vec<usize> = (train..n).collect();
        let (val, test) = rest.split_at(rest.len() / 2);
        Dataset::new(
            Task::Regression,
            Tensor::new(vec![n, 1], values).unwrap(),
            Tensor::zeros(&[n, 0]),
            vec![],
            vec![],
            (0..n).map(|i| i as f64).collect(),
            Splits {
                train: (0..train).collect(),
                val: val.to_vec(),
                test: test.to_vec(),
            },
        )
        .unwrap()
    }

    /// Inverse normal CDF by bisection on the error function, independent of
    /// the library routine used in the transform.
    fn probit_oracle(p: f64) -> f64 {
        let cdf = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn tied_references_map_to_middle() {
        let q = [0.0, 1.0, 1.0, 1.0, 2.0];
        assert_eq!(interpolated_cdf(&q, 1.0), 0.5);
        assert_eq!(interpolated_cdf(&q, 0.5), 0.125);
        assert_eq!(interpolated_cdf(&q, -1.0), 0.0);
        assert_eq!(interpolated_cdf(&q, 2.0), 1.0);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let ds = column_dataset(vec![4.0; 10], 6);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::Quantile]).unwrap();
        let f = pp.transform(&ds, &(0..10).collect::<Vec<_>>()).unwrap();
        assert!(f.num.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_maps_near_zero() {
        let mut vals: Vec<f64> = (1..=1000).map(f64::from).collect();
        vals.extend([0.0, 0.0]);
        let ds = column_dataset(vals, 1000);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::Quantile]).unwrap();
        assert!(pp.transform_value(0, 500.5).unwrap().abs() < 1e-9);
        assert!(pp.transform_value(0, 500.0).unwrap().abs() < 5e-3);
    }

    #[test]
    fn below_minimum_clamps() {
        let mut vals: Vec<f64> = (1..=100).map(f64::from).collect();
        vals.extend([0.0, 0.0]);
        let ds = column_dataset(vals, 100);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::Quantile]).unwrap();
        let v = pp.transform_value(0, -1e9).unwrap();
        assert!((v - probit_oracle(1e-6)).abs() < 1e-6);
        assert!((v + 4.7534).abs() < 1e-4);
    }

    #[test]
    fn standardize_uses_train_stats() {
        // train values 3 and 7: mean 5, std 2
        let ds = column_dataset(vec![3.0, 7.0, 100.0, -100.0], 2);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::Standardize]).unwrap();
        assert_eq!(pp.transform_value(0, 9.0).unwrap(), 2.0);
    }

    #[test]
    fn zero_variance_standardize_clamps_std() {
        let ds = column_dataset(vec![3.0, 3.0, 1.0, 2.0], 2);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::Standardize]).unwrap();
        assert_eq!(pp.transform_value(0, 4.0).unwrap(), 1.0);
    }

    #[test]
    fn nan_input_is_fatal() {
        let ds = column_dataset(vec![3.0, 7.0, 1.0, 2.0], 2);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::None]).unwrap();
        assert!(matches!(pp.transform_value(0, f64::NAN), Err(Error::NonFinite(_))));
    }

    #[test]
    fn regression_target_round_trip() {
        let ds = column_dataset(vec![0.0; 6], 4);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::None]).unwrap();
        let t = pp.target_scaler().unwrap();
        // train labels 0..3: mean 1.5
        assert_eq!(t.mean, 1.5);
        let lab = pp.labels(&ds, &[5]);
        assert!((t.decode(lab[0]) - 5.0).abs() < 1e-12);
        assert!((lab[0] - (5.0 - 1.5) / t.std).abs() < 1e-12);
    }

    fn cat_dataset() -> Dataset {
        Dataset::new(
            Task::Binclass,
            Tensor::zeros(&[5, 0]),
            Tensor::new(vec![5, 1], vec![1.0, 0.0, 1.0, 0.0, 1.0]).unwrap(),
            vec![0, 1, 2, 1, 3],
            vec![4],
            vec![0.0, 1.0, 0.0, 1.0, 1.0],
            Splits {
                train: vec![0, 1, 2],
                val: vec![3],
                test: vec![4],
            },
        )
        .unwrap()
    }

    #[test]
    fn one_hot_seen_and_unseen() {
        let ds = cat_dataset();
        let pp = Preprocessor::fit(&ds, &[]).unwrap();
        let f = pp.transform(&ds, &[1, 4]).unwrap();
        // binary column then three seen categories
        assert_eq!(f.other.row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(f.other.row(1), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn transform_is_repeatable() {
        let vals: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64).collect();
        let ds = column_dataset(vals, 30);
        let pp = Preprocessor::fit(&ds, &[NumPolicy::Quantile]).unwrap();
        let rows: Vec<usize> = (0..50).collect();
        assert_eq!(pp.transform(&ds, &rows).unwrap(), pp.transform(&ds, &rows).unwrap());
    }

    proptest! {
        #[test]
        fn quantile_transform_is_monotone(
            train in proptest::collection::vec(-100.0f64..100.0, 2..300),
            mut probes in proptest::collection::vec(-150.0f64..150.0, 2..50),
        ) {
            let n = train.len();
            let mut vals = train.clone();
            vals.extend([0.0, 0.0]);
            let ds = column_dataset(vals, n);
            let pp = Preprocessor::fit(&ds, &[NumPolicy::Quantile]).unwrap();
            probes.sort_by(f64::total_cmp);
            let out: Vec<f64> = probes.iter().map(|&x| pp.transform_value(0, x).unwrap()).collect();
            for w in out.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
        }

        #[test]
        fn fit_ignores_non_train_rows(
            train in proptest::collection::vec(-10.0f64..10.0, 3..40),
            other in proptest::collection::vec(-10.0f64..10.0, 4..20),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let n = train.len();
            let mut a = train.clone();
            a.extend(&other);
            let mut shuffled = other.clone();
            shuffled.shuffle(&mut crate::rng::stream(seed, "t", &[]));
            let mut b = train.clone();
            b.extend(&shuffled);
            let pa = Preprocessor::fit(&column_dataset(a, n), &[NumPolicy::Quantile]).unwrap();
            let pb = Preprocessor::fit(&column_dataset(b, n), &[NumPolicy::Quantile]).unwrap();
            prop_assert_eq!(pa, pb);
        }

        #[test]
        fn one_hot_has_single_one_for_seen(code in 0usize..4) {
            let ds = cat_dataset();
            let pp = Preprocessor::fit(&ds, &[]).unwrap();
            let mut ds2 = ds.clone();
            ds2.x_cat[3] = code;
            let f = pp.transform(&ds2, &[3]).unwrap();
            let ones = f.other.row(0)[1..].iter().filter(|&&v| v == 1.0).count();
            prop_assert_eq!(ones, usize::from(code <= 2));
        }
    }
}
