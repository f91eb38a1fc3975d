//! Aggregated tool index: one entry per document holding the mean of its
//! copies' vectors (or every copy's vector, for max-over-copies scoring).
//!
//! On disk an index is a directory with `manifest.json` and `vectors.bin`.
//! The payload is little-endian:
//!
//! ```text
//! magic "RIDX" | u32 version | u64 entry count
//! entry:  u32 id_len | id bytes | u32 copy_count
//!         | u8 kind (0 = mean, 1 = per-copy) | u32 vector_count | vector*
//! vector: u8 tag (0 = dense, 1 = sparse)
//!         dense:  u32 dim | f64 * dim
//!         sparse: u32 nnz | (u32 term_len | term bytes | f64) * nnz
//! ```
//!
//! The manifest records the SHA-256 of the payload; loading verifies it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::embedding::{
    similarity, DenseVector, EmbeddingError, EmbeddingVector, Encoder, EncoderKind, SparseVector,
};
use crate::expansion::{ExpandedDocument, ExpansionMode};
use crate::hashing::sha256_hex;
use crate::rank::{score_rows, ScoreMatrix};

const MAGIC: &[u8; 4] = b"RIDX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("document `{0}` has no copies")]
    MissingCopies(String),
    #[error("copy for `{0}` which is not in the corpus")]
    UnknownDocument(String),
    #[error("index is empty")]
    Empty,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("index payload checksum mismatch (manifest {expected}, file {actual})")]
    Checksum { expected: String, actual: String },
    #[error("corrupt index payload: {0}")]
    Corrupt(String),
    #[error("index was built with {index} vectors but the encoder is {encoder}")]
    EncoderMismatch { index: EncoderKind, encoder: EncoderKind },
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IndexError {
    IndexError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// How a document's copies are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Score against the mean of the copy vectors.
    #[default]
    Mean,
    /// Score every copy and keep the best (ablation).
    Max,
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        })
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(format!("unknown aggregation `{other}` (expected mean or max)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IndexVectors {
    Mean(EmbeddingVector),
    PerCopy(Vec<EmbeddingVector>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocIndexEntry {
    pub doc_id: String,
    pub vectors: IndexVectors,
    pub copy_count: usize,
}

impl DocIndexEntry {
    pub fn similarity(&self, query: &EmbeddingVector) -> Result<f64, EmbeddingError> {
        match &self.vectors {
            IndexVectors::Mean(v) => similarity(query, v),
            IndexVectors::PerCopy(copies) => copies.iter().try_fold(f64::NEG_INFINITY, |best, c| {
                Ok(best.max(similarity(query, c)?))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub encoder: EncoderKind,
    pub dim: Option<usize>,
    /// Largest number of synthetic-query copies per document; 0 when built
    /// from unexpanded documents.
    pub m: usize,
    pub aggregation: Aggregation,
    pub expansion_mode: Option<ExpansionMode>,
    pub corpus_hash: String,
    pub doc_count: usize,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolIndex {
    pub manifest: IndexManifest,
    pub entries: Vec<DocIndexEntry>,
}

/// Encodes every copy and aggregates per document, in corpus order. Copy
/// vectors are summed in `copy_index` order.
pub fn build_index(
    corpus: &Corpus,
    copies: &[ExpandedDocument],
    encoder: &Encoder,
    aggregation: Aggregation,
) -> Result<ToolIndex, IndexError> {
    let mut grouped: HashMap<&str, Vec<&ExpandedDocument>> = HashMap::new();
    for c in copies {
        grouped.entry(c.doc_id.as_str()).or_default().push(c);
    }
    let known = corpus.doc_ids();
    if let Some(c) = copies.iter().find(|c| !known.contains(c.doc_id.as_str())) {
        return Err(IndexError::UnknownDocument(c.doc_id.clone()));
    }
    if corpus.is_empty() {
        return Err(IndexError::Empty);
    }

    let mut ordered: Vec<(&str, Vec<&ExpandedDocument>)> = Vec::with_capacity(corpus.len());
    for doc in &corpus.documents {
        let mut group = grouped
            .remove(doc.doc_id.as_str())
            .ok_or_else(|| IndexError::MissingCopies(doc.doc_id.clone()))?;
        group.sort_by_key(|c| c.copy_index);
        ordered.push((doc.doc_id.as_str(), group));
    }

    let texts: Vec<&str> = ordered
        .iter()
        .flat_map(|(_, g)| g.iter().map(|c| c.text.as_str()))
        .collect();
    let mut vectors = encoder.encode_documents(&texts)?.into_iter();

    let mut entries = Vec::with_capacity(ordered.len());
    let mut m = 0;
    let mut expansion_mode = None;
    for (doc_id, group) in &ordered {
        let copy_vectors: Vec<EmbeddingVector> = vectors.by_ref().take(group.len()).collect();
        let expanded = group.iter().filter(|c| c.copy_index >= 1).count();
        m = m.max(expanded);
        if expanded > 0 && expansion_mode.is_none() {
            let doc = corpus.get(doc_id).expect("known document");
            expansion_mode = Some(if group[0].text.contains(&doc.text) {
                ExpansionMode::Append
            } else {
                ExpansionMode::Replace
            });
        }
        let index_vectors = match aggregation {
            Aggregation::Mean => IndexVectors::Mean(EmbeddingVector::mean(&copy_vectors)?),
            Aggregation::Max => IndexVectors::PerCopy(copy_vectors),
        };
        entries.push(DocIndexEntry {
            doc_id: doc_id.to_string(),
            vectors: index_vectors,
            copy_count: group.len(),
        });
    }

    let dim = entries.iter().find_map(|e| match &e.vectors {
        IndexVectors::Mean(EmbeddingVector::Dense(d)) => Some(d.dim()),
        IndexVectors::PerCopy(v) => v.iter().find_map(|x| match x {
            EmbeddingVector::Dense(d) => Some(d.dim()),
            _ => None,
        }),
        _ => None,
    });
    let payload = encode_payload(&entries);
    Ok(ToolIndex {
        manifest: IndexManifest {
            format_version: FORMAT_VERSION,
            encoder: encoder.kind(),
            dim,
            m,
            aggregation,
            expansion_mode,
            corpus_hash: corpus.content_hash(),
            doc_count: entries.len(),
            payload_sha256: sha256_hex(&payload),
        },
        entries,
    })
}

/// Index over the documents themselves, one copy each.
pub fn build_raw_index(corpus: &Corpus, encoder: &Encoder) -> Result<ToolIndex, IndexError> {
    let copies: Vec<ExpandedDocument> = corpus.documents.iter().map(ExpandedDocument::unexpanded).collect();
    build_index(corpus, &copies, encoder, Aggregation::Mean)
}

impl ToolIndex {
    pub fn doc_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.doc_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_encoder(&self, encoder: &Encoder) -> Result<(), IndexError> {
        if self.manifest.encoder != encoder.kind() {
            return Err(IndexError::EncoderMismatch {
                index: self.manifest.encoder,
                encoder: encoder.kind(),
            });
        }
        Ok(())
    }

    /// Similarity of every document to one query vector, in index order.
    pub fn similarities(&self, query: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
        Ok(self
            .entries
            .iter()
            .map(|e| e.similarity(query))
            .collect::<Result<_, _>>()?)
    }

    /// Similarities and per-intent reversed ranks for every (intent, doc) pair.
    pub fn score_intents(&self, intents: &[EmbeddingVector]) -> Result<ScoreMatrix, IndexError> {
        if self.entries.is_empty() {
            return Err(IndexError::Empty);
        }
        let rows = intents
            .iter()
            .map(|q| self.similarities(q))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(score_rows(&self.doc_ids(), &rows))
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let payload = encode_payload(&self.entries);
        let mut manifest = self.manifest.clone();
        manifest.payload_sha256 = sha256_hex(&payload);
        let vectors = dir.join("vectors.bin");
        fs::write(&vectors, &payload).map_err(|e| io_err(&vectors, e))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let manifest_path = dir.join("manifest.json");
        let raw = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: IndexManifest =
            serde_json::from_str(&raw).map_err(|e| io_err(&manifest_path, e))?;
        let vectors = dir.join("vectors.bin");
        let payload = fs::read(&vectors).map_err(|e| io_err(&vectors, e))?;
        let actual = sha256_hex(&payload);
        if actual != manifest.payload_sha256 {
            return Err(IndexError::Checksum {
                expected: manifest.payload_sha256,
                actual,
            });
        }
        let entries = decode_payload(&payload)?;
        if entries.len() != manifest.doc_count {
            return Err(IndexError::Corrupt(format!(
                "manifest lists {} documents, payload has {}",
                manifest.doc_count,
                entries.len()
            )));
        }
        Ok(Self { manifest, entries })
    }
}

fn encode_payload(entries: &[DocIndexEntry]) -> Vec<u8> {
    fn put_str(buf: &mut Vec<u8>, s: &str) {
        buf.extend((s.len() as u32).to_le_bytes());
        buf.extend(s.as_bytes());
    }
    fn put_vector(buf: &mut Vec<u8>, v: &EmbeddingVector) {
        match v {
            EmbeddingVector::Dense(d) => {
                buf.push(0);
                buf.extend((d.dim() as u32).to_le_bytes());
                for x in &d.values {
                    buf.extend(x.to_le_bytes());
                }
            }
            EmbeddingVector::Sparse(s) => {
                buf.push(1);
                buf.extend((s.len() as u32).to_le_bytes());
                for (term, w) in s.iter() {
                    put_str(buf, term);
                    buf.extend(w.to_le_bytes());
                }
            }
        }
    }

    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(FORMAT_VERSION.to_le_bytes());
    buf.extend((entries.len() as u64).to_le_bytes());
    for e in entries {
        put_str(&mut buf, &e.doc_id);
        buf.extend((e.copy_count as u32).to_le_bytes());
        let vectors: Vec<&EmbeddingVector> = match &e.vectors {
            IndexVectors::Mean(v) => {
                buf.push(0);
                vec![v]
            }
            IndexVectors::PerCopy(vs) => {
                buf.push(1);
                vs.iter().collect()
            }
        };
        buf.extend((vectors.len() as u32).to_le_bytes());
        for v in vectors {
            put_vector(&mut buf, v);
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| IndexError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, IndexError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| IndexError::Corrupt(e.to_string()))
    }

    fn vector(&mut self) -> Result<EmbeddingVector, IndexError> {
        match self.u8()? {
            0 => {
                let dim = self.u32()? as usize;
                let values = (0..dim).map(|_| self.f64()).collect::<Result<_, _>>()?;
                Ok(EmbeddingVector::Dense(DenseVector::new(values)))
            }
            1 => {
                let nnz = self.u32()? as usize;
                let entries = (0..nnz)
                    .map(|_| Ok((self.string()?, self.f64()?)))
                    .collect::<Result<Vec<_>, IndexError>>()?;
                Ok(EmbeddingVector::Sparse(SparseVector::from_entries(entries)))
            }
            tag => Err(IndexError::Corrupt(format!("unknown vector tag {tag}"))),
        }
    }
}

fn decode_payload(buf: &[u8]) -> Result<Vec<DocIndexEntry>, IndexError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(IndexError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(IndexError::Corrupt(format!("unsupported version {version}")));
    }
    let count = r.u64()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let doc_id = r.string()?;
        let copy_count = r.u32()? as usize;
        let kind = r.u8()?;
        let n = r.u32()? as usize;
        let mut vs = (0..n).map(|_| r.vector()).collect::<Result<Vec<_>, _>>()?;
        let vectors = match kind {
            0 if n == 1 => IndexVectors::Mean(vs.remove(0)),
            1 => IndexVectors::PerCopy(vs),
            _ => return Err(IndexError::Corrupt(format!("bad entry kind {kind} with {n} vectors"))),
        };
        entries.push(DocIndexEntry {
            doc_id,
            vectors,
            copy_count,
        });
    }
    if r.pos != buf.len() {
        return Err(IndexError::Corrupt("trailing bytes".into()));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ToolDocument;
    use crate::embedding::{DenseEncoder, HashEmbedder};
    use serde_json::json;
    use std::sync::Arc;

    fn corpus(ids: &[&str]) -> Corpus {
        let docs = ids
            .iter()
            .map(|id| {
                let raw = json!({"name": id, "description": format!("{id} tool")});
                ToolDocument::new(*id, raw.as_object().unwrap().clone()).unwrap()
            })
            .collect();
        Corpus::from_documents(docs, "mem").unwrap()
    }

    fn copy(doc_id: &str, i: u32, text: &str) -> ExpandedDocument {
        ExpandedDocument {
            doc_id: doc_id.into(),
            copy_index: i,
            text: text.into(),
        }
    }

    fn dense() -> Encoder {
        Encoder::Dense(Arc::new(DenseEncoder::new(Box::new(HashEmbedder::new(32)), 8)))
    }

    #[test]
    fn one_entry_per_document_in_corpus_order() {
        let c = corpus(&["b", "a", "c"]);
        let copies = vec![
            copy("a", 2, "alpha two"),
            copy("c", 1, "gamma"),
            copy("a", 1, "alpha one"),
            copy("b", 1, "beta"),
        ];
        let idx = build_index(&c, &copies, &Encoder::bm25(), Aggregation::Mean).unwrap();
        assert_eq!(idx.doc_ids(), ["b", "a", "c"]);
        assert_eq!(idx.entries[1].copy_count, 2);
        assert_eq!(idx.manifest.m, 2);
        assert_eq!(idx.manifest.encoder, EncoderKind::Bm25);
    }

    #[test]
    fn single_copy_mean_is_the_copy() {
        let c = corpus(&["a"]);
        let idx = build_index(&c, &[copy("a", 1, "x y")], &dense(), Aggregation::Mean).unwrap();
        let direct = dense().encode_documents(&["x y"]).unwrap().remove(0);
        assert_eq!(idx.entries[0].vectors, IndexVectors::Mean(direct));
        assert_eq!(idx.manifest.dim, Some(32));
    }

    #[test]
    fn missing_copies_rejected() {
        let c = corpus(&["a", "b"]);
        let err = build_index(&c, &[copy("a", 1, "x")], &Encoder::bm25(), Aggregation::Mean).unwrap_err();
        assert!(matches!(err, IndexError::MissingCopies(id) if id == "b"));
    }

    #[test]
    fn unknown_document_rejected() {
        let c = corpus(&["a"]);
        let copies = [copy("a", 1, "x"), copy("zz", 1, "y")];
        assert!(matches!(
            build_index(&c, &copies, &Encoder::bm25(), Aggregation::Mean),
            Err(IndexError::UnknownDocument(_))
        ));
    }

    #[test]
    fn max_aggregation_takes_best_copy() {
        let c = corpus(&["a", "b"]);
        let copies = [copy("a", 1, "red"), copy("a", 2, "blue"), copy("b", 1, "green")];
        let idx = build_index(&c, &copies, &dense(), Aggregation::Max).unwrap();
        let q = dense().encode_queries(&["blue"]).unwrap().remove(0);
        let sims = idx.similarities(&q).unwrap();
        assert!((sims[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(&["a", "b"]);
        let copies = [copy("a", 1, "red fox"), copy("a", 2, "blue"), copy("b", 1, "green")];
        for (enc, agg) in [
            (Encoder::bm25(), Aggregation::Mean),
            (Encoder::bm25(), Aggregation::Max),
            (dense(), Aggregation::Mean),
            (dense(), Aggregation::Max),
        ] {
            let idx = build_index(&c, &copies, &enc, agg).unwrap();
            let path = dir.path().join(format!("{}-{agg}", enc.kind()));
            idx.save(&path).unwrap();
            assert_eq!(ToolIndex::load(&path).unwrap(), idx);
        }
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(&["a"]);
        let idx = build_index(&c, &[copy("a", 1, "x")], &Encoder::bm25(), Aggregation::Mean).unwrap();
        idx.save(dir.path()).unwrap();
        let path = dir.path().join("vectors.bin");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(ToolIndex::load(dir.path()), Err(IndexError::Checksum { .. })));
    }

    #[test]
    fn score_intents_checks_dimensions() {
        let c = corpus(&["a"]);
        let idx = build_index(&c, &[copy("a", 1, "x")], &dense(), Aggregation::Mean).unwrap();
        let wrong = EmbeddingVector::Dense(DenseVector::new(vec![1.0, 0.0]));
        assert!(matches!(
            idx.score_intents(&[wrong]),
            Err(IndexError::Embedding(EmbeddingError::DimensionMismatch { .. }))
        ));
    }
}
