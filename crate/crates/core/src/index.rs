//! Exact dense retrieval: top-k by dot product over an [`EmbeddingStore`].
//!
//! Brute force by design — dot products accumulate in f64 for deterministic
//! scores, ties break by ascending document id, and an exclusion set lets
//! each loop iteration retrieve only new documents.

use std::collections::HashSet;
use std::sync::Arc;

use thiserror::Error;

use crate::embeddings::EmbeddingStore;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("query has dim {query}, store has dim {store}")]
    DimMismatch { query: usize, store: usize },
    #[error("query contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("k must be at least 1")]
    ZeroK,
}

/// A query embedding with the store's dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    pub values: Vec<f32>,
}

impl QueryVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// One retrieval result: document id and its dot-product score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredHit {
    pub doc_id: String,
    pub score: f32,
}

/// Read-only search over a fixed embedding store.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    store: Arc<EmbeddingStore>,
}

impl EmbeddingIndex {
    pub fn new(store: Arc<EmbeddingStore>) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    fn check_query(&self, query: &QueryVector) -> Result<(), IndexError> {
        if query.dim() != self.store.dim() {
            return Err(IndexError::DimMismatch {
                query: query.dim(),
                store: self.store.dim(),
            });
        }
        if let Some(pos) = query.values.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(pos));
        }
        Ok(())
    }

    /// Top-k hits by descending dot product, skipping `exclude`.
    /// Returns min(k, |store| - |exclude ∩ store|) hits; ties break by id.
    pub fn search_top_k(
        &self,
        query: &QueryVector,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        self.check_query(query)?;

        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(self.store.len());
        for row in 0..self.store.len() {
            if exclude.contains(self.store.row_id(row)) {
                continue;
            }
            scored.push((dot_f64(self.store.row(row), &query.values), row));
        }
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then_with(|| self.store.row_id(a.1).cmp(self.store.row_id(b.1)))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(score, row)| ScoredHit {
                doc_id: self.store.row_id(row).to_string(),
                score: score as f32,
            })
            .collect())
    }

    /// Top-m over the whole store (no exclusions); m past the corpus size
    /// clamps to the corpus.
    pub fn search_top_m_for_training(
        &self,
        query: &QueryVector,
        m: usize,
    ) -> Result<Vec<ScoredHit>, IndexError> {
        self.search_top_k(query, m, &HashSet::new())
    }
}

/// Dot product accumulated in f64.
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn two_doc_index() -> EmbeddingIndex {
        let store = EmbeddingStore::new(
            2,
            vec!["d1".into(), "d2".into()],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        EmbeddingIndex::new(Arc::new(store))
    }

    fn random_index(rng: &mut impl Rng, n: usize, dim: usize) -> EmbeddingIndex {
        let ids: Vec<String> = (0..n).map(|i| format!("d{i:04}")).collect();
        let matrix: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        EmbeddingIndex::new(Arc::new(EmbeddingStore::new(dim, ids, matrix).unwrap()))
    }

    /// Independent oracle: score every non-excluded row in f64, full sort,
    /// take the prefix.
    fn full_sort_oracle(
        index: &EmbeddingIndex,
        query: &[f32],
        k: usize,
        exclude: &HashSet<String>,
    ) -> Vec<String> {
        let store = index.store();
        let mut rows: Vec<(f64, String)> = (0..store.len())
            .filter(|&r| !exclude.contains(store.row_id(r)))
            .map(|r| {
                let mut acc = 0.0f64;
                for (x, y) in store.row(r).iter().zip(query) {
                    acc += *x as f64 * *y as f64;
                }
                (acc, store.row_id(r).to_string())
            })
            .collect();
        rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        rows.truncate(k);
        rows.into_iter().map(|(_, id)| id).collect()
    }

    #[test]
    fn orthogonal_basis_top_one() {
        let index = two_doc_index();
        let hits = index
            .search_top_k(&QueryVector::new(vec![1.0, 0.0]), 1, &HashSet::new())
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].doc_id, "d1");
        assert_eq!(hits[0].score, 1.0);
    }

    #[test]
    fn exclusion_forces_second_best() {
        let index = two_doc_index();
        let exclude: HashSet<String> = ["d1".to_string()].into();
        let hits = index
            .search_top_k(&QueryVector::new(vec![1.0, 0.0]), 1, &exclude)
            .unwrap();
        assert_eq!(hits[0].doc_id, "d2");
        assert_eq!(hits[0].score, 0.0);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let index = two_doc_index();
        let err = index
            .search_top_k(&QueryVector::new(vec![1.0]), 1, &HashSet::new())
            .unwrap_err();
        assert!(matches!(err, IndexError::DimMismatch { query: 1, store: 2 }));
    }

    #[test]
    fn matches_full_sort_oracle_on_random_store() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let index = random_index(&mut rng, 64, 8);
        let query: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let hits = index
            .search_top_k(&QueryVector::new(query.clone()), 8, &HashSet::new())
            .unwrap();
        let got: Vec<String> = hits.iter().map(|h| h.doc_id.clone()).collect();
        assert_eq!(got, full_sort_oracle(&index, &query, 8, &HashSet::new()));
    }

    #[test]
    fn top_m_equal_to_corpus_returns_full_sort() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let index = random_index(&mut rng, 20, 4);
        let query: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let hits = index
            .search_top_m_for_training(&QueryVector::new(query.clone()), 20)
            .unwrap();
        assert_eq!(hits.len(), 20);
        let got: Vec<String> = hits.iter().map(|h| h.doc_id.clone()).collect();
        assert_eq!(got, full_sort_oracle(&index, &query, 20, &HashSet::new()));
    }

    #[test]
    fn top_m_clamps_past_corpus_size() {
        let index = two_doc_index();
        let hits = index
            .search_top_m_for_training(&QueryVector::new(vec![0.5, 0.5]), 10)
            .unwrap();
        assert_eq!(hits.len(), 2);
    }

    #[test]
    fn top_m_prefix_matches_oracle_on_thousand_docs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let index = random_index(&mut rng, 1000, 8);
        let query: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let hits = index
            .search_top_m_for_training(&QueryVector::new(query.clone()), 32)
            .unwrap();
        let got: Vec<String> = hits.iter().map(|h| h.doc_id.clone()).collect();
        assert_eq!(got, full_sort_oracle(&index, &query, 32, &HashSet::new()));
    }

    #[test]
    fn scores_match_f64_oracle_within_1e6_relative() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let index = random_index(&mut rng, 100, 16);
        let query: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let hits = index
            .search_top_k(&QueryVector::new(query.clone()), 100, &HashSet::new())
            .unwrap();
        for hit in hits {
            let row = index.store().vector(&hit.doc_id).unwrap();
            let exact = dot_f64(row, &query);
            let err = (f64::from(hit.score) - exact).abs();
            assert!(err <= 1e-6 * exact.abs().max(1e-9), "score {} vs oracle {exact}", hit.score);
        }
    }

    proptest! {
        #[test]
        fn results_exclude_and_dedupe(
            seed in 0u64..500,
            k in 1usize..12,
            n_exclude in 0usize..10,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let index = random_index(&mut rng, 30, 4);
            let exclude: HashSet<String> = (0..n_exclude).map(|i| format!("d{:04}", i * 3 % 30)).collect();
            let query: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let hits = index.search_top_k(&QueryVector::new(query.clone()), k, &exclude).unwrap();

            let ids: Vec<&str> = hits.iter().map(|h| h.doc_id.as_str()).collect();
            let unique: HashSet<&str> = ids.iter().copied().collect();
            prop_assert_eq!(ids.len(), unique.len());
            prop_assert!(ids.iter().all(|id| !exclude.contains(*id)));
            prop_assert_eq!(hits.len(), k.min(30 - exclude.len()));

            // determinism: same inputs, same ordered output
            let again = index.search_top_k(&QueryVector::new(query), k, &exclude).unwrap();
            prop_assert_eq!(hits, again);
        }
    }
}
