//! Small generated datasets for tests and diagnostics.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Splits, Task};
use crate::rng;
use crate::tensor::Tensor;

/// `n` rows of `p` Gaussian features with a smooth nonlinear target; the
/// split is 60/20/20 in row order.
pub fn regression(n: usize, p: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, "synthetic", &[n as u64, p as u64]);
    let x: Vec<f64> = (0..n * p).map(|_| r.sample(StandardNormal)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let row = &x[i * p..(i + 1) * p];
            let lin: f64 = row.iter().enumerate().map(|(j, v)| v / (j + 1) as f64).sum();
            lin.sin() + 0.5 * row[0] * row[0] + 0.1 * r.sample::<f64, _>(StandardNormal)
        })
        .collect();
    build(Task::Regression, n, p, x, y)
}

/// Classification variant: labels from the quantiles of the same latent score.
pub fn classification(n: usize, p: usize, n_classes: usize, seed: u64) -> Dataset {
    let reg = regression(n, p, seed);
    let mut sorted = reg.y.clone();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..n_classes).map(|c| sorted[c * n / n_classes]).collect();
    let y = reg
        .y
        .iter()
        .map(|v| cuts.iter().filter(|&&c| *v >= c).count() as f64)
        .collect();
    let task = if n_classes == 2 {
        Task::Binclass
    } else {
        Task::Multiclass(n_classes)
    };
    build(task, n, p, reg.x_num.into_data(), y)
}

fn build(task: Task, n: usize, p: usize, x: Vec<f64>, y: Vec<f64>) -> Dataset {
    let n_train = n * 3 / 5;
    let n_val = (n - n_train) / 2;
    Dataset::new(
        task,
        Tensor::new(vec![n, p], x).expect("n x p values"),
        Tensor::zeros(&[n, 0]),
        Vec::new(),
        Vec::new(),
        y,
        Splits {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        },
    )
    .expect("generated dataset is valid")
}
