use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{tokenize, EmbeddingError, SparseVector};

pub const DEFAULT_K1: f64 = 1.5;
pub const DEFAULT_B: f64 = 0.75;

/// Collection statistics for BM25, fitted once and then read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Stats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
    pub doc_freq: BTreeMap<String, usize>,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Stats {
    /// Each text is one document; expanded copies count separately.
    pub fn fit(texts: &[&str], k1: f64, b: f64) -> Result<Self, EmbeddingError> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyCorpus);
        }
        let mut doc_freq = BTreeMap::new();
        let mut total_len = 0usize;
        for text in texts {
            let tokens = tokenize(text);
            total_len += tokens.len();
            let unique: HashSet<String> = tokens.into_iter().collect();
            for t in unique {
                *doc_freq.entry(t).or_insert(0) += 1;
            }
        }
        let avg_doc_len = total_len as f64 / texts.len() as f64;
        Ok(Self {
            doc_count: texts.len(),
            // All-empty collections would divide by zero in the length norm.
            avg_doc_len: if avg_doc_len > 0.0 { avg_doc_len } else { 1.0 },
            doc_freq,
            k1,
            b,
        })
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let n = self.doc_count as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Document-side weights; dotting with [`SparseVector::term_counts`] of a
    /// query gives the BM25 score of that document.
    pub fn doc_vector(&self, text: &str) -> SparseVector {
        let tokens = tokenize(text);
        let len = tokens.len() as f64;
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_insert(0.0) += 1.0;
        }
        let norm = self.k1 * (1.0 - self.b + self.b * len / self.avg_doc_len);
        SparseVector::from_entries(tf.into_iter().map(|(t, f)| {
            let w = self.idf(&t) * f * (self.k1 + 1.0) / (f + norm);
            (t, w)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doc_freq_counts_documents() {
        let s = Bm25Stats::fit(&["a b", "a a"], DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(s.doc_freq["a"], 2);
        assert_eq!(s.doc_freq["b"], 1);
        assert!(s.doc_freq.values().all(|&df| df <= s.doc_count));
    }

    #[test]
    fn idf_half_documents() {
        let s = Bm25Stats::fit(&["a", "b"], DEFAULT_K1, DEFAULT_B).unwrap();
        assert!((s.idf("a") - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn average_length() {
        let s = Bm25Stats::fit(&["a b", "a"], DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(s.avg_doc_len, 1.5);
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(
            Bm25Stats::fit(&[], DEFAULT_K1, DEFAULT_B),
            Err(EmbeddingError::EmptyCorpus)
        ));
    }

    #[test]
    fn single_doc_hand_value() {
        // tf = 2, len = avg_len: weight = idf * (2 * 2.5) / (2 + 1.5) = idf * 10/7
        let s = Bm25Stats::fit(&["a a"], DEFAULT_K1, DEFAULT_B).unwrap();
        let v = s.doc_vector("a a");
        let idf = (1.0f64 + 0.5 / 1.5).ln();
        assert!((v.get("a") - idf * 10.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn absent_terms_not_stored_and_disjoint_query_scores_zero() {
        let s = Bm25Stats::fit(&["a b", "c"], DEFAULT_K1, DEFAULT_B).unwrap();
        let v = s.doc_vector("a b");
        assert_eq!(v.get("c"), 0.0);
        assert_eq!(v.len(), 2);
        assert_eq!(SparseVector::term_counts("x y z").dot(&v), 0.0);
    }
}
