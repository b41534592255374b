//! Candidate rows, their labels and their encodings under a fixed model.

use crate::data::Features;
use crate::error::{Error, Result};
use crate::model::{ContextRecord, Tabr};
use crate::retrieval::PoolTensors;
use crate::tensor::Tensor;

/// Encoded candidates tagged with the parameter version that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateStore {
    pub features: Features,
    /// Labels in training space: standardized targets or class ids.
    pub labels: Vec<f64>,
    /// Dataset row ids, used to exclude a training object from its own context.
    pub ids: Vec<usize>,
    pub encoded: PoolTensors,
    pub version: String,
}

fn check_labels(model: &Tabr, features: &Features, labels: &[f64], ids: &[usize]) -> Result<()> {
    if labels.len() != features.rows() || ids.len() != features.rows() {
        return Err(Error::shape(
            "candidate_store",
            format!("{} rows, {} labels, {} ids", features.rows(), labels.len(), ids.len()),
        ));
    }
    match model.task.n_classes() {
        Some(c) => {
            if let Some(bad) = labels.iter().find(|&&l| l < 0.0 || l.fract() != 0.0 || l >= c as f64) {
                return Err(Error::Config(format!("label {bad} is not a class of a {c}-class task")));
            }
        }
        None => {
            if labels.iter().any(|l| !l.is_finite()) {
                return Err(Error::NonFinite("candidate labels".into()));
            }
        }
    }
    Ok(())
}

impl CandidateStore {
    pub fn build(model: &Tabr, features: Features, labels: Vec<f64>, ids: Vec<usize>) -> Result<Self> {
        check_labels(model, &features, &labels, &ids)?;
        let encoded = model.encode_candidates(&features, &labels)?;
        Ok(CandidateStore {
            features,
            labels,
            ids,
            encoded,
            version: model.version(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Appends labeled rows, encoding only the new ones.
    pub fn add_candidates(&mut self, model: &Tabr, features: Features, labels: Vec<f64>, ids: Vec<usize>) -> Result<()> {
        self.check_version(model)?;
        check_labels(model, &features, &labels, &ids)?;
        if features.rows() == 0 {
            return Ok(());
        }
        let encoded = model.encode_candidates(&features, &labels)?;
        self.encoded.append(&encoded)?;
        self.features = Features {
            num: Tensor::concat_rows(&[&self.features.num, &features.num])?,
            other: Tensor::concat_rows(&[&self.features.other, &features.other])?,
        };
        self.labels.extend(labels);
        self.ids.extend(ids);
        Ok(())
    }

    pub fn check_version(&self, model: &Tabr) -> Result<()> {
        let v = model.version();
        if v != self.version {
            return Err(Error::Config(format!(
                "candidate encodings are from parameter version {}, model is {v}",
                self.version
            )));
        }
        Ok(())
    }

    /// Predictions for rows of the dataset. Rows whose id is in the store
    /// never see themselves as candidates.
    pub fn predict(
        &self,
        model: &Tabr,
        features: &Features,
        row_ids: Option<&[usize]>,
        remove: Option<&[f64]>,
    ) -> Result<(Tensor, Vec<ContextRecord>)> {
        self.check_version(model)?;
        let exclude: Vec<Option<usize>> = match row_ids {
            None => vec![None; features.rows()],
            Some(rows) => {
                let pos: std::collections::HashMap<usize, usize> =
                    self.ids.iter().enumerate().map(|(p, &i)| (i, p)).collect();
                rows.iter().map(|r| pos.get(r).copied()).collect()
            }
        };
        model.predict(features, &self.encoded, &exclude, remove)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, NumPolicy, Preprocessor, Task};
    use crate::model::TabrConfig;
    use crate::retrieval::RetrievalConfig;

    fn setup(task: Task) -> (Tabr, Features, Vec<f64>) {
        let ds = match task {
            Task::Regression => synthetic::regression(60, 3, 11),
            _ => synthetic::classification(60, 3, 3, 11),
        };
        let all: Vec<usize> = (0..60).collect();
        let pp = Preprocessor::fit(&ds, &[NumPolicy::Quantile; 3]).unwrap();
        let mut cfg = TabrConfig::tabr_s();
        cfg.d = 8;
        cfg.retrieval = RetrievalConfig::step(4, 0.0).unwrap();
        cfg.retrieval.m = 5;
        let model = Tabr::new(cfg, ds.task, 3, pp.other_width(&ds), 0).unwrap();
        (model, pp.transform(&ds, &all).unwrap(), pp.labels(&ds, &all))
    }

    fn part(f: &Features, y: &[f64], rows: std::ops::Range<usize>) -> (Features, Vec<f64>, Vec<usize>) {
        let r: Vec<usize> = rows.collect();
        (f.select(&r), r.iter().map(|&i| y[i]).collect(), r)
    }

    #[test]
    fn incremental_equals_full_build() {
        for task in [Task::Regression, Task::Multiclass(3)] {
            let (model, f, y) = setup(task);
            let (fa, ya, ia) = part(&f, &y, 0..20);
            let (fb, yb, ib) = part(&f, &y, 20..50);
            let (fu, yu, iu) = part(&f, &y, 0..50);
            let (fq, _, _) = part(&f, &y, 50..60);
            let mut grown = CandidateStore::build(&model, fa, ya, ia).unwrap();
            grown.add_candidates(&model, fb, yb, ib).unwrap();
            let full = CandidateStore::build(&model, fu, yu, iu).unwrap();
            assert_eq!(grown, full);
            let (pa, ra) = grown.predict(&model, &fq, None, None).unwrap();
            let (pb, rb) = full.predict(&model, &fq, None, None).unwrap();
            assert_eq!(pa, pb);
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn adding_nothing_changes_nothing() {
        let (model, f, y) = setup(Task::Regression);
        let (fa, ya, ia) = part(&f, &y, 0..20);
        let store = CandidateStore::build(&model, fa, ya, ia).unwrap();
        let mut same = store.clone();
        let (fe, ye, ie) = part(&f, &y, 0..0);
        same.add_candidates(&model, fe, ye, ie).unwrap();
        assert_eq!(store, same);
    }

    #[test]
    fn rebuild_is_bitwise_identical() {
        let (model, f, y) = setup(Task::Regression);
        let (fa, ya, ia) = part(&f, &y, 0..30);
        let a = CandidateStore::build(&model, fa.clone(), ya.clone(), ia.clone()).unwrap();
        let b = CandidateStore::build(&model, fa, ya, ia).unwrap();
        assert_eq!(a.encoded, b.encoded);
    }

    #[test]
    fn duplicate_candidates_take_adjacent_ranks() {
        let (model, f, y) = setup(Task::Regression);
        let (fa, ya, ia) = part(&f, &y, 0..30);
        let mut store = CandidateStore::build(&model, fa, ya, ia).unwrap();
        let (fd, yd, _) = part(&f, &y, 3..4);
        store.add_candidates(&model, fd, yd, vec![1000]).unwrap();
        let (fq, _, _) = part(&f, &y, 40..60);
        let (_, recs) = store.predict(&model, &fq, None, None).unwrap();
        for r in recs {
            if let Some(p) = r.indices.iter().position(|&i| i == 3) {
                // equal keys tie; the original has the lower index
                if p + 1 < r.indices.len() {
                    assert_eq!(r.indices[p + 1], 30);
                }
            } else {
                assert!(!r.indices.contains(&30));
            }
        }
    }

    #[test]
    fn stale_version_and_bad_labels_are_rejected() {
        let (mut model, f, y) = setup(Task::Multiclass(3));
        let (fa, ya, ia) = part(&f, &y, 0..20);
        assert!(CandidateStore::build(&model, fa.clone(), vec![3.0; 20], ia.clone()).is_err());
        let mut store = CandidateStore::build(&model, fa, ya, ia).unwrap();
        let id = model.head.linear.weight;
        model.params.get_mut(id).data_mut()[0] += 0.5;
        let (fb, yb, ib) = part(&f, &y, 20..30);
        assert!(store.add_candidates(&model, fb, yb, ib).is_err());
        assert!(store.predict(&model, &f, None, None).is_err());
    }

    #[test]
    fn training_rows_skip_themselves() {
        let (model, f, y) = setup(Task::Regression);
        let (fa, ya, ia) = part(&f, &y, 0..30);
        let store = CandidateStore::build(&model, fa.clone(), ya, ia.clone()).unwrap();
        let (_, recs) = store.predict(&model, &fa, Some(&ia), None).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert!(!r.indices.contains(&i));
        }
    }
}
