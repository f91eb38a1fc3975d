//! Offline document expansion: sample synthetic user queries for each tool
//! document and pair each one with the document to form expanded copies.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, ToolDocument};
use crate::llm::{GenerationRequest, LlmClient, LlmError, DEFAULT_MAX_OUTPUT_TOKENS};
use crate::prompts::{fill, QUERY_GENERATION_TEMPLATE, TOOL_DOCUMENT_SLOT};

pub const DEFAULT_QUERIES_PER_DOC: u32 = 10;
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("{failed} of {total} generation calls failed for `{doc_id}`: {last}")]
    Generation {
        doc_id: String,
        failed: usize,
        total: usize,
        last: LlmError,
    },
    #[error("synthetic query for `{query_doc}` passed with document `{doc}`")]
    MismatchedDoc { doc: String, query_doc: String },
    #[error("copy index must be at least 1")]
    ZeroCopyIndex,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed expansion record on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// How a synthetic query is combined with its document.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpansionMode {
    /// `Documentation: <doc> Query: <query>`.
    #[default]
    Append,
    /// The synthetic query alone (ablation).
    Replace,
}

impl std::str::FromStr for ExpansionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "append" => Ok(ExpansionMode::Append),
            "replace" => Ok(ExpansionMode::Replace),
            other => Err(format!("unknown expansion mode `{other}` (expected append or replace)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Copy `i` is requested with seed `base_seed + i`.
    pub base_seed: u64,
    /// Extra attempts for an empty completion before falling back to the document text.
    pub empty_retries: u32,
    pub parallelism: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            base_seed: 0,
            empty_retries: 2,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub doc_id: String,
    pub copy_index: u32,
    pub text: String,
    pub gen_params: GenerationSummary,
    /// Set when generation failed or stayed empty and the document text was used.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedDocument {
    pub doc_id: String,
    /// 1-based; 0 marks the unexpanded document itself.
    pub copy_index: u32,
    pub text: String,
}

impl ExpandedDocument {
    /// The document as its own single copy, for running without expansion.
    pub fn unexpanded(doc: &ToolDocument) -> Self {
        Self {
            doc_id: doc.doc_id.clone(),
            copy_index: 0,
            text: doc.text.clone(),
        }
    }
}

pub fn build_generation_prompt(doc: &ToolDocument) -> String {
    fill(QUERY_GENERATION_TEMPLATE, TOOL_DOCUMENT_SLOT, &doc.text)
}

pub fn concat_template(doc_text: &str, query: &str) -> String {
    format!("Documentation: {doc_text} Query: {query}")
}

/// Generates copies `1..=m`.
pub fn generate_synthetic_queries(
    doc: &ToolDocument,
    m: u32,
    params: &GenerationParams,
    client: &LlmClient,
) -> Result<Vec<SyntheticQuery>, ExpansionError> {
    let indices: Vec<u32> = (1..=m).collect();
    generate_copies(doc, &indices, params, client)
}

/// Generates only the given copy indices, one independent call each.
pub fn generate_copies(
    doc: &ToolDocument,
    copy_indices: &[u32],
    params: &GenerationParams,
    client: &LlmClient,
) -> Result<Vec<SyntheticQuery>, ExpansionError> {
    if copy_indices.contains(&0) {
        return Err(ExpansionError::ZeroCopyIndex);
    }
    let prompt = build_generation_prompt(doc);
    let request = |copy_index: u32, attempt: u32| GenerationRequest {
        prompt: prompt.clone(),
        temperature: params.temperature,
        max_output_tokens: params.max_output_tokens,
        seed: Some(
            params
                .base_seed
                .wrapping_add(copy_index as u64)
                .wrapping_add(attempt as u64 * 1_000_003),
        ),
    };

    let mut outcomes: Vec<Option<Result<(String, u64), LlmError>>> = vec![None; copy_indices.len()];
    let mut pending: Vec<usize> = (0..copy_indices.len()).collect();
    for attempt in 0..=params.empty_retries {
        if pending.is_empty() {
            break;
        }
        let reqs: Vec<GenerationRequest> = pending
            .iter()
            .map(|&slot| request(copy_indices[slot], attempt))
            .collect();
        let results = client.generate_all(&reqs, params.parallelism);
        let mut still_empty = Vec::new();
        for ((slot, req), result) in pending.iter().zip(&reqs).zip(results) {
            let seed = req.seed.expect("seeded request");
            match result {
                Ok(resp) if resp.text.trim().is_empty() => {
                    still_empty.push(*slot);
                    outcomes[*slot] = Some(Ok((String::new(), seed)));
                }
                Ok(resp) => outcomes[*slot] = Some(Ok((resp.text.trim().to_string(), seed))),
                Err(e) => outcomes[*slot] = Some(Err(e)),
            }
        }
        pending = still_empty;
    }

    let failures: Vec<&LlmError> = outcomes
        .iter()
        .filter_map(|o| o.as_ref().and_then(|r| r.as_ref().err()))
        .collect();
    if failures.len() * 2 > copy_indices.len() {
        return Err(ExpansionError::Generation {
            doc_id: doc.doc_id.clone(),
            failed: failures.len(),
            total: copy_indices.len(),
            last: failures.last().copied().cloned().expect("non-empty"),
        });
    }

    let queries = copy_indices
        .iter()
        .zip(outcomes)
        .map(|(&copy_index, outcome)| {
            let (text, seed, fallback) = match outcome.expect("every slot attempted") {
                Ok((text, seed)) if !text.is_empty() => (text, Some(seed), false),
                Ok((_, seed)) => {
                    log::warn!("empty completions for {} copy {copy_index}; using document text", doc.doc_id);
                    (doc.text.clone(), Some(seed), true)
                }
                Err(e) => {
                    log::warn!("generation failed for {} copy {copy_index}: {e}; using document text", doc.doc_id);
                    (doc.text.clone(), None, true)
                }
            };
            SyntheticQuery {
                doc_id: doc.doc_id.clone(),
                copy_index,
                text,
                gen_params: GenerationSummary {
                    temperature: params.temperature,
                    max_output_tokens: params.max_output_tokens,
                    seed,
                },
                fallback,
            }
        })
        .collect();
    Ok(queries)
}

pub fn expand_document(
    doc: &ToolDocument,
    queries: &[SyntheticQuery],
) -> Result<Vec<ExpandedDocument>, ExpansionError> {
    expand_document_with(doc, queries, ExpansionMode::Append)
}

/// One copy per query, ordered by `copy_index`.
pub fn expand_document_with(
    doc: &ToolDocument,
    queries: &[SyntheticQuery],
    mode: ExpansionMode,
) -> Result<Vec<ExpandedDocument>, ExpansionError> {
    if let Some(q) = queries.iter().find(|q| q.doc_id != doc.doc_id) {
        return Err(ExpansionError::MismatchedDoc {
            doc: doc.doc_id.clone(),
            query_doc: q.doc_id.clone(),
        });
    }
    let mut ordered: Vec<&SyntheticQuery> = queries.iter().collect();
    ordered.sort_by_key(|q| q.copy_index);
    Ok(ordered
        .into_iter()
        .map(|q| ExpandedDocument {
            doc_id: doc.doc_id.clone(),
            copy_index: q.copy_index,
            text: match mode {
                ExpansionMode::Append => concat_template(&doc.text, &q.text),
                ExpansionMode::Replace => q.text.clone(),
            },
        })
        .collect())
}

/// One line of the persisted expansion file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub doc_id: String,
    pub copy_index: u32,
    pub synthetic_query: String,
    pub expanded_text: String,
    #[serde(default)]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ExpansionRecord {
    pub fn from_query(doc: &ToolDocument, q: &SyntheticQuery) -> Self {
        Self {
            doc_id: q.doc_id.clone(),
            copy_index: q.copy_index,
            synthetic_query: q.text.clone(),
            expanded_text: concat_template(&doc.text, &q.text),
            fallback: q.fallback,
            seed: q.gen_params.seed,
        }
    }

    pub fn to_query(&self, params: &GenerationParams) -> SyntheticQuery {
        SyntheticQuery {
            doc_id: self.doc_id.clone(),
            copy_index: self.copy_index,
            text: self.synthetic_query.clone(),
            gen_params: GenerationSummary {
                temperature: params.temperature,
                max_output_tokens: params.max_output_tokens,
                seed: self.seed,
            },
            fallback: self.fallback,
        }
    }
}

pub fn load_expansions(path: &Path) -> Result<Vec<ExpansionRecord>, ExpansionError> {
    let io = |source| ExpansionError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExpansionRecord = serde_json::from_str(&line).map_err(|e| ExpansionError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert((rec.doc_id.clone(), rec.copy_index)) {
            return Err(ExpansionError::Parse {
                line: i + 1,
                message: format!("duplicate ({}, {})", rec.doc_id, rec.copy_index),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes records sorted by corpus order, then copy index.
pub fn save_expansions(
    path: &Path,
    corpus: &Corpus,
    records: &[ExpansionRecord],
) -> Result<(), ExpansionError> {
    let io = |source| ExpansionError::Io {
        path: path.display().to_string(),
        source,
    };
    let position: HashMap<&str, usize> = corpus
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| (d.doc_id.as_str(), i))
        .collect();
    let mut sorted: Vec<&ExpansionRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (position.get(r.doc_id.as_str()).copied().unwrap_or(usize::MAX), r.copy_index));
    let mut buf = String::new();
    for r in sorted {
        buf.push_str(&serde_json::to_string(r).expect("serializable record"));
        buf.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = File::create(&tmp).map_err(io)?;
    f.write_all(buf.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

/// Expanded copies for every document, in corpus order. Documents without
/// any record are skipped.
pub fn expanded_corpus(
    corpus: &Corpus,
    records: &[ExpansionRecord],
    m: u32,
    mode: ExpansionMode,
) -> Vec<ExpandedDocument> {
    let mut by_doc: HashMap<&str, Vec<&ExpansionRecord>> = HashMap::new();
    for r in records.iter().filter(|r| r.copy_index >= 1 && r.copy_index <= m) {
        by_doc.entry(r.doc_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for doc in &corpus.documents {
        let Some(mut recs) = by_doc.remove(doc.doc_id.as_str()) else {
            continue;
        };
        recs.sort_by_key(|r| r.copy_index);
        out.extend(recs.into_iter().map(|r| ExpandedDocument {
            doc_id: r.doc_id.clone(),
            copy_index: r.copy_index,
            text: match mode {
                ExpansionMode::Append => concat_template(&doc.text, &r.synthetic_query),
                ExpansionMode::Replace => r.synthetic_query.clone(),
            },
        }));
    }
    out
}
