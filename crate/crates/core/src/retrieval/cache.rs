use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ContextIndex;

/// Frozen context indices, one list per training candidate. After freezing,
/// training skips the search and only re-encodes the cached neighbours.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextCache {
    width: usize,
    indices: Vec<usize>,
    /// Epoch after which the cache was built.
    pub frozen_at: usize,
}

/// Context of one batch, remapped into a compact pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachedContext {
    /// Candidate ids that make up the pool, sorted.
    pub pool: Vec<usize>,
    /// Per-row positions into `pool`.
    pub index: ContextIndex,
}

impl ContextCache {
    pub fn new(lists: &[Vec<usize>], frozen_at: usize) -> Result<Self> {
        let ci = ContextIndex::from_lists(lists)?;
        let width = ci.width();
        let indices = lists.concat();
        if indices.iter().any(|&i| i >= lists.len()) {
            return Err(Error::shape("context_cache", "cached index outside the candidate set"));
        }
        Ok(ContextCache {
            width,
            indices,
            frozen_at,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize) -> &[usize] {
        &self.indices[row * self.width..(row + 1) * self.width]
    }

    /// Union of the cached contexts of `rows`, with each row's list rewritten
    /// as positions in that union.
    pub fn batch(&self, rows: &[usize]) -> Result<CachedContext> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::shape("context_cache", format!("row {bad} of {}", self.len())));
        }
        let mut pool: Vec<usize> = rows.iter().flat_map(|&r| self.get(r).iter().copied()).collect();
        pool.sort_unstable();
        pool.dedup();
        let pos: HashMap<usize, usize> = pool.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        let flat = rows
            .iter()
            .flat_map(|&r| self.get(r).iter().map(|i| pos[i]))
            .collect();
        Ok(CachedContext {
            index: ContextIndex::new(rows.len(), self.width, flat)?,
            pool,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn batch_remaps_into_union() {
        let c = ContextCache::new(&[vec![1, 2], vec![0, 2], vec![3, 1], vec![2, 0]], 4).unwrap();
        let b = c.batch(&[0, 2]).unwrap();
        assert_eq!(b.pool, vec![1, 2, 3]);
        assert_eq!(b.index.row(0), &[0, 1]);
        assert_eq!(b.index.row(1), &[2, 0]);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(ContextCache::new(&[vec![5]], 0).is_err());
        let c = ContextCache::new(&[vec![0]], 0).unwrap();
        assert!(c.batch(&[1]).is_err());
    }

    proptest! {
        #[test]
        fn remapped_indices_point_at_original_ids(
            n in 2usize..40,
            seed_lists in proptest::collection::vec(proptest::collection::vec(0usize..1000, 3), 2..40),
            rows in proptest::collection::vec(0usize..1000, 1..20),
        ) {
            let n = n.min(seed_lists.len());
            let lists: Vec<Vec<usize>> = seed_lists[..n].iter().map(|l| l.iter().map(|v| v % n).collect()).collect();
            let c = ContextCache::new(&lists, 1).unwrap();
            let rows: Vec<usize> = rows.iter().map(|r| r % n).collect();
            let b = c.batch(&rows).unwrap();
            prop_assert!(b.pool.windows(2).all(|w| w[0] < w[1]));
            for (k, &r) in rows.iter().enumerate() {
                let mapped: Vec<usize> = b.index.row(k).iter().map(|&p| b.pool[p]).collect();
                prop_assert_eq!(&mapped[..], c.get(r));
            }
        }
    }
}
