use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Similarity;
use crate::tensor::{gemm, Tensor};

/// Heap entry ordered so that the heap top is the worst kept candidate:
/// lower score is worse, and on equal scores the higher index is worse.
#[derive(Clone, Copy, Debug)]
struct Entry {
    score: f64,
    index: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // "greater" means worse
        other
            .score
            .total_cmp(&self.score)
            .then(self.index.cmp(&other.index))
    }
}

/// Indices of the `m` largest scores, best first; ties go to the lower
/// index. `exclude` is removed from candidacy. Returns fewer than `m`
/// entries when there are not enough candidates.
pub fn top_m(scores: &[f64], m: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
    let mut heap: BinaryHeap<Entry> = BinaryHeap::with_capacity(m + 1);
    if m == 0 {
        return Vec::new();
    }
    // score of the worst kept entry once the heap is full
    let mut floor = f64::NEG_INFINITY;
    for (index, &score) in scores.iter().enumerate() {
        if score < floor || Some(index) == exclude {
            continue;
        }
        let e = Entry { score, index };
        if heap.len() < m {
            heap.push(e);
            if heap.len() == m {
                floor = heap.peek().expect("heap is full").score;
            }
        } else if e < *heap.peek().expect("heap is full") {
            heap.pop();
            heap.push(e);
            floor = heap.peek().expect("heap is full").score;
        }
    }
    heap.into_sorted_vec()
        .into_iter()
        .map(|e| (e.index, e.score))
        .collect()
}

/// Number of queries scored against the keys per matrix product.
const QUERY_CHUNK: usize = 64;

/// Full scan: for every query row, the top-`m` keys by similarity, best
/// first. Scores are only used for ranking: for the L2 kind the per-query
/// constant `-|q|^2` is dropped.
pub fn search(
    queries: &Tensor,
    keys: &Tensor,
    similarity: Similarity,
    m: usize,
    exclude: &[Option<usize>],
) -> Vec<Vec<usize>> {
    let norms = (similarity == Similarity::L2).then(|| squared_norms(keys));
    search_basis(queries, keys, norms.as_deref(), m, exclude)
}

pub fn squared_norms(keys: &Tensor) -> Vec<f64> {
    (0..keys.rows())
        .map(|i| keys.row(i).iter().map(|v| v * v).sum())
        .collect()
}

/// Ranks candidate `i` by `q_b · basis_i`, or by `2 q_b · basis_i - norms_i`
/// when `norms` is given. For keys `k_i = x_i A + c`, an L2 scan over the
/// keys ranks like this scan with `basis = x`, queries `x_q G` and norms
/// `x_i G x_i^T`, where `G = A A^T`.
pub fn search_basis(
    queries: &Tensor,
    basis: &Tensor,
    norms: Option<&[f64]>,
    m: usize,
    exclude: &[Option<usize>],
) -> Vec<Vec<usize>> {
    let (b, d) = (queries.rows(), queries.cols());
    let n = basis.rows();
    assert_eq!(basis.cols(), d);
    assert_eq!(exclude.len(), b);
    if let Some(norms) = norms {
        assert_eq!(norms.len(), n);
    }
    let mut out = Vec::with_capacity(b);
    let mut scores = vec![0.0; QUERY_CHUNK.min(b.max(1)) * n];
    for start in (0..b).step_by(QUERY_CHUNK) {
        let rows = QUERY_CHUNK.min(b - start);
        let s = &mut scores[..rows * n];
        let q = &queries.data()[start * d..(start + rows) * d];
        gemm(rows, d, n, q, false, basis.data(), true, s, 0.0);
        for r in 0..rows {
            let row = &mut s[r * n..(r + 1) * n];
            if let Some(norms) = norms {
                for (v, kn) in row.iter_mut().zip(norms) {
                    *v = 2.0 * *v - kn;
                }
            }
            out.push(top_m(row, m, exclude[start + r]).into_iter().map(|(i, _)| i).collect());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive oracle: stable sort by descending score keeps lower
    /// indices first among ties.
    fn sort_oracle(scores: &[f64], m: usize, exclude: Option<usize>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        idx.truncate(m);
        idx
    }

    #[test]
    fn small_example() {
        let r: Vec<usize> = top_m(&[0.1, 0.9, 0.5], 2, None).into_iter().map(|e| e.0).collect();
        assert_eq!(r, vec![1, 2]);
    }

    #[test]
    fn matches_sort_oracle_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for t in 0..1000 {
            let n = rng.random_range(1..400);
            // coarse values force many ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-50..50) as f64) / 7.0).collect();
            let ex = (t % 3 == 0).then(|| rng.random_range(0..n));
            let got: Vec<usize> = top_m(&scores, 96, ex).into_iter().map(|e| e.0).collect();
            assert_eq!(got, sort_oracle(&scores, 96, ex));
        }
    }

    #[test]
    fn fewer_candidates_than_m() {
        let r = top_m(&[1.0, 2.0], 5, Some(0));
        assert_eq!(r, vec![(1, 2.0)]);
    }

    #[test]
    fn scan_matches_direct_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, n, d) = (70, 150, 5);
        let q = Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let k = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let ex: Vec<Option<usize>> = (0..b).map(|i| (i % 2 == 0).then_some(i)).collect();
        let got = search(&q, &k, Similarity::L2, 10, &ex);
        for r in 0..b {
            let scores: Vec<f64> = (0..n)
                .map(|i| -q.row(r).iter().zip(k.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            assert_eq!(got[r], sort_oracle(&scores, 10, ex[r]));
        }
        let got = search(&q, &k, Similarity::Dot, 7, &ex);
        for r in 0..b {
            let scores: Vec<f64> = (0..n)
                .map(|i| q.row(r).iter().zip(k.row(i)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            assert_eq!(got[r], sort_oracle(&scores, 7, ex[r]));
        }
    }

    #[test]
    fn factored_scan_matches_key_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, n, r, d) = (20, 300, 3, 6);
        let mut rand = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x = Tensor::new(vec![n, r], rand(n * r)).unwrap();
        let a = Tensor::new(vec![r, d], rand(r * d)).unwrap();
        let c = rand(d);
        let q = Tensor::new(vec![b, d], rand(b * d)).unwrap();
        let mut keys = x.matmul(&a).unwrap();
        for i in 0..n {
            for j in 0..d {
                keys.data_mut()[i * d + j] += c[j];
            }
        }
        let mut qa = vec![0.0; b * r];
        gemm(b, d, r, q.data(), false, a.data(), true, &mut qa, 0.0);
        let qa = Tensor::new(vec![b, r], qa).unwrap();
        let ex = vec![None; b];
        let norms = squared_norms(&keys);
        assert_eq!(search(&q, &keys, Similarity::L2, 12, &ex), search_basis(&qa, &x, Some(&norms), 12, &ex));
        assert_eq!(search(&q, &keys, Similarity::Dot, 12, &ex), search_basis(&qa, &x, None, 12, &ex));
    }

    proptest! {
        #[test]
        fn shift_invariance(scores in proptest::collection::vec(-10.0f64..10.0, 1..200), c in -100.0f64..100.0, m in 1usize..50) {
            let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
            let a: Vec<usize> = top_m(&scores, m, None).into_iter().map(|e| e.0).collect();
            let b: Vec<usize> = top_m(&shifted, m, None).into_iter().map(|e| e.0).collect();
            // adding c may merge near-equal scores by rounding; compare as sets of score ranks
            let ra: Vec<f64> = a.iter().map(|&i| scores[i]).collect();
            let rb: Vec<f64> = b.iter().map(|&i| scores[i]).collect();
            prop_assert_eq!(ra.len(), rb.len());
            for (x, y) in ra.iter().zip(&rb) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
