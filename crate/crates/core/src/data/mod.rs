//! Datasets on disk, preprocessing fitted on the training split, batching.
//!
//! A dataset directory holds `meta.txt`, optional `X_num.csv`, `X_bin.csv`,
//! `X_cat.csv`, `Y.csv` and `idx_{train,val,test}.txt`. See [`load_dataset`].

mod batches;
mod load;
mod preprocess;
pub mod synthetic;

pub use batches::make_batches;
pub use load::load_dataset;
pub use preprocess::{Features, NumPolicy, Preprocessor, TargetScaler};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Binclass,
    Multiclass(usize),
    Regression,
}

impl Task {
    pub fn is_regression(self) -> bool {
        matches!(self, Task::Regression)
    }

    pub fn n_classes(self) -> Option<usize> {
        match self {
            Task::Binclass => Some(2),
            Task::Multiclass(c) => Some(c),
            Task::Regression => None,
        }
    }

    /// Width of the prediction head.
    pub fn n_outputs(self) -> usize {
        match self {
            Task::Multiclass(c) => c,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Train => "train",
            Part::Val => "val",
            Part::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }
}

/// Raw features, labels and the split. Class labels are stored as `f64`
/// holding integer values.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: Task,
    /// `n x p_num`.
    pub x_num: Tensor,
    /// `n x p_bin`, entries in {0, 1}.
    pub x_bin: Tensor,
    /// `n x p_cat` dense category codes, row-major.
    pub x_cat: Vec<usize>,
    pub cat_cardinalities: Vec<usize>,
    pub y: Vec<f64>,
    pub splits: Splits,
}

impl Dataset {
    /// Builds a dataset and validates every invariant.
    pub fn new(
        task: Task,
        x_num: Tensor,
        x_bin: Tensor,
        x_cat: Vec<usize>,
        cat_cardinalities: Vec<usize>,
        y: Vec<f64>,
        splits: Splits,
    ) -> Result<Self> {
        let ds = Dataset {
            task,
            x_num,
            x_bin,
            x_cat,
            cat_cardinalities,
            y,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p_num(&self) -> usize {
        self.x_num.shape()[1]
    }

    pub fn p_bin(&self) -> usize {
        self.x_bin.shape()[1]
    }

    pub fn p_cat(&self) -> usize {
        self.cat_cardinalities.len()
    }

    pub fn class(&self, i: usize) -> usize {
        self.y[i] as usize
    }

    pub fn cat_row(&self, i: usize) -> &[usize] {
        let p = self.p_cat();
        &self.x_cat[i * p..(i + 1) * p]
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        let bad = |msg: String| Err(Error::Config(msg));
        if self.x_num.shape().len() != 2 || self.x_num.shape()[0] != n {
            return bad(format!("X_num shape {:?} for {n} labels", self.x_num.shape()));
        }
        if self.x_bin.shape().len() != 2 || self.x_bin.shape()[0] != n {
            return bad(format!("X_bin shape {:?} for {n} labels", self.x_bin.shape()));
        }
        if self.x_cat.len() != n * self.cat_cardinalities.len() {
            return bad("X_cat size does not match cardinalities".into());
        }
        if self.x_bin.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return bad("binary features must be 0 or 1".into());
        }
        let p = self.p_cat();
        for (k, &c) in self.x_cat.iter().enumerate() {
            if c >= self.cat_cardinalities[k % p] {
                return bad(format!("category code {c} out of range in column {}", k % p));
            }
        }
        if let Some(c) = self.task.n_classes() {
            if let Some(v) = self.y.iter().find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= c as f64) {
                return bad(format!("label {v} is not a class in [0, {c})"));
            }
        } else if self.y.iter().any(|v| !v.is_finite()) {
            return bad("non-finite regression target".into());
        }
        let mut seen = vec![None; n];
        for part in [Part::Train, Part::Val, Part::Test] {
            let idx = self.splits.get(part);
            if idx.is_empty() {
                return bad(format!("empty split: {}", part.name()));
            }
            for &i in idx {
                if i >= n {
                    return bad(format!("{} index {i} out of range", part.name()));
                }
                if let Some(prev) = seen[i].replace(part) {
                    return bad(format!(
                        "row {i} appears in both {} and {}",
                        Part::name(prev),
                        part.name()
                    ));
                }
            }
        }
        if let Some(i) = seen.iter().position(Option::is_none) {
            return bad(format!("row {i} belongs to no split"));
        }
        Ok(())
    }
}
