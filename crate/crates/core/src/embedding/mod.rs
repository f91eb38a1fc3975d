//! Text representations and similarity.
//!
//! Sparse vectors come from BM25: documents get precomputed BM25 term
//! weights and queries get raw term counts, so their dot product is the
//! BM25 score. Dense vectors come from an embedding provider and are
//! L2-normalized, so their dot product is cosine similarity.

mod bm25;
mod cache;
mod dense;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::bm25::{Bm25Stats, DEFAULT_B, DEFAULT_K1};
pub use self::cache::EmbeddingCache;
pub use self::dense::{
    DenseEncoder, EmbeddingProvider, HashEmbedder, HttpEmbedder, HttpEmbedderConfig,
};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot fit BM25 on an empty corpus")]
    EmptyCorpus,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot compare a {0} vector with a {1} vector")]
    KindMismatch(&'static str, &'static str),
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("embedding cache error: {0}")]
    Cache(String),
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Term → weight. Zero weights are never stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector(BTreeMap<String, f64>);

impl SparseVector {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut map = BTreeMap::new();
        for (term, w) in entries {
            *map.entry(term).or_insert(0.0) += w;
        }
        map.retain(|_, w| *w != 0.0);
        Self(map)
    }

    /// Raw term counts of `text`; the query side of BM25.
    pub fn term_counts(text: &str) -> Self {
        Self::from_entries(tokenize(text).into_iter().map(|t| (t, 1.0)))
    }

    pub fn get(&self, term: &str) -> f64 {
        self.0.get(term).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.iter().map(|(t, w)| w * large.get(t)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    pub values: Vec<f64>,
}

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Scales to unit L2 norm; the zero vector is left as is.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Self { values };
        }
        Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EmbeddingVector {
    Sparse(SparseVector),
    Dense(DenseVector),
}

impl EmbeddingVector {
    pub fn kind(&self) -> &'static str {
        match self {
            EmbeddingVector::Sparse(_) => "sparse",
            EmbeddingVector::Dense(_) => "dense",
        }
    }

    /// Component-wise arithmetic mean, summed in slice order.
    pub fn mean(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, EmbeddingError> {
        let first = vectors.first().ok_or(EmbeddingError::EmptyCorpus)?;
        let m = vectors.len() as f64;
        match first {
            EmbeddingVector::Sparse(_) => {
                let mut acc: BTreeMap<String, f64> = BTreeMap::new();
                for v in vectors {
                    let EmbeddingVector::Sparse(s) = v else {
                        return Err(EmbeddingError::KindMismatch("sparse", v.kind()));
                    };
                    for (t, w) in s.iter() {
                        *acc.entry(t.to_string()).or_insert(0.0) += w;
                    }
                }
                Ok(EmbeddingVector::Sparse(SparseVector::from_entries(
                    acc.into_iter().map(|(t, w)| (t, w / m)),
                )))
            }
            EmbeddingVector::Dense(d) => {
                let dim = d.dim();
                let mut acc = vec![0.0; dim];
                for v in vectors {
                    let EmbeddingVector::Dense(d) = v else {
                        return Err(EmbeddingError::KindMismatch("dense", v.kind()));
                    };
                    if d.dim() != dim {
                        return Err(EmbeddingError::DimensionMismatch {
                            expected: dim,
                            got: d.dim(),
                        });
                    }
                    for (a, x) in acc.iter_mut().zip(&d.values) {
                        *a += x;
                    }
                }
                Ok(EmbeddingVector::Dense(DenseVector::new(
                    acc.into_iter().map(|a| a / m).collect(),
                )))
            }
        }
    }
}

/// Dot product. For unit-norm dense vectors this is cosine similarity.
pub fn similarity(q: &EmbeddingVector, d: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    match (q, d) {
        (EmbeddingVector::Sparse(a), EmbeddingVector::Sparse(b)) => Ok(a.dot(b)),
        (EmbeddingVector::Dense(a), EmbeddingVector::Dense(b)) => {
            if a.dim() != b.dim() {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: a.dim(),
                    got: b.dim(),
                });
            }
            Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
        }
        (a, b) => Err(EmbeddingError::KindMismatch(a.kind(), b.kind())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Bm25,
    Dense,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Bm25 => "bm25",
            EncoderKind::Dense => "dense",
        })
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bm25" => Ok(EncoderKind::Bm25),
            "dense" => Ok(EncoderKind::Dense),
            other => Err(format!("unknown encoder `{other}` (expected bm25 or dense)")),
        }
    }
}

/// Maps text to vectors. BM25 fits its statistics on whatever collection
/// is passed to [`Encoder::encode_documents`].
#[derive(Debug, Clone)]
pub enum Encoder {
    Bm25 { k1: f64, b: f64 },
    Dense(Arc<DenseEncoder>),
}

impl Encoder {
    pub fn bm25() -> Self {
        Encoder::Bm25 {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Bm25 { .. } => EncoderKind::Bm25,
            Encoder::Dense(_) => EncoderKind::Dense,
        }
    }

    pub fn encode_documents(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        match self {
            Encoder::Bm25 { k1, b } => {
                let stats = Bm25Stats::fit(texts, *k1, *b)?;
                Ok(texts
                    .iter()
                    .map(|t| EmbeddingVector::Sparse(stats.doc_vector(t)))
                    .collect())
            }
            Encoder::Dense(enc) => Ok(enc
                .encode(texts)?
                .into_iter()
                .map(EmbeddingVector::Dense)
                .collect()),
        }
    }

    pub fn encode_queries(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        match self {
            Encoder::Bm25 { .. } => Ok(texts
                .iter()
                .map(|t| EmbeddingVector::Sparse(SparseVector::term_counts(t)))
                .collect()),
            Encoder::Dense(enc) => Ok(enc
                .encode(texts)?
                .into_iter()
                .map(EmbeddingVector::Dense)
                .collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sparse(entries: &[(&str, f64)]) -> SparseVector {
        SparseVector::from_entries(entries.iter().map(|(t, w)| (t.to_string(), *w)))
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Book a Flight!"), ["book", "a", "flight"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("GPT-4"), ["gpt", "4"]);
    }

    #[test]
    fn dense_dot_examples() {
        let a = EmbeddingVector::Dense(DenseVector::new(vec![1.0, 0.0]));
        let b = EmbeddingVector::Dense(DenseVector::new(vec![0.0, 1.0]));
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn sparse_dot_example() {
        let q = EmbeddingVector::Sparse(sparse(&[("a", 2.0)]));
        let d = EmbeddingVector::Sparse(sparse(&[("a", 0.5), ("b", 9.0)]));
        assert_eq!(similarity(&q, &d).unwrap(), 1.0);
    }

    #[test]
    fn dimension_and_kind_mismatch() {
        let a = EmbeddingVector::Dense(DenseVector::new(vec![1.0, 0.0]));
        let b = EmbeddingVector::Dense(DenseVector::new(vec![1.0, 0.0, 0.0]));
        assert!(matches!(
            similarity(&a, &b),
            Err(EmbeddingError::DimensionMismatch { expected: 2, got: 3 })
        ));
        let s = EmbeddingVector::Sparse(SparseVector::default());
        assert!(matches!(similarity(&a, &s), Err(EmbeddingError::KindMismatch(..))));
    }

    #[test]
    fn zero_weights_not_stored() {
        let v = sparse(&[("a", 0.0), ("b", 1.0), ("c", 2.0), ("c", -2.0)]);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn dense_mean() {
        let vs = [
            EmbeddingVector::Dense(DenseVector::new(vec![1.0, 0.0])),
            EmbeddingVector::Dense(DenseVector::new(vec![0.0, 1.0])),
        ];
        assert_eq!(
            EmbeddingVector::mean(&vs).unwrap(),
            EmbeddingVector::Dense(DenseVector::new(vec![0.5, 0.5]))
        );
    }

    #[test]
    fn sparse_mean() {
        let vs = [
            EmbeddingVector::Sparse(sparse(&[("a", 2.0)])),
            EmbeddingVector::Sparse(sparse(&[("a", 0.0), ("b", 4.0)])),
        ];
        assert_eq!(
            EmbeddingVector::mean(&vs).unwrap(),
            EmbeddingVector::Sparse(sparse(&[("a", 1.0), ("b", 2.0)]))
        );
    }

    #[test]
    fn normalization() {
        let v = DenseVector::normalized(vec![3.0, 4.0]);
        assert!((v.norm() - 1.0).abs() < 1e-12);
        assert_eq!(DenseVector::normalized(vec![0.0, 0.0]).values, [0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(text in "\\PC{0,60}") {
            let once = tokenize(&text);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn sparse_dot_symmetric(
            a in proptest::collection::btree_map("[a-e]", -5.0f64..5.0, 0..5),
            b in proptest::collection::btree_map("[a-e]", -5.0f64..5.0, 0..5),
        ) {
            let a = SparseVector::from_entries(a);
            let b = SparseVector::from_entries(b);
            prop_assert_eq!(a.dot(&b), b.dot(&a));
        }
    }
}
