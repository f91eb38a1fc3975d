//! Tool-document corpora and labeled evaluation datasets.
//!
//! Three input shapes are accepted: ToolBench-style API records
//! (`category_name`, `tool_name`, `api_name`, ...), ToolE-style
//! `{name, description}` records, and JSONL holding either the canonical
//! `{doc_id, raw}` form written by [`Corpus::save`] or bare records.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::hashing::sha256_hex;

/// Fields rendered first, in this order. Everything else follows sorted by key.
const FIELD_ORDER: &[&str] = &[
    "category_name",
    "category",
    "tool_name",
    "api_name",
    "name",
    "tool_description",
    "api_description",
    "description",
    "required_parameters",
    "optional_parameters",
    "method",
];

/// Keys that identify a record rather than describe it.
const ID_KEYS: &[&str] = &["doc_id"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in record {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("document has no descriptive content")]
    EmptyDocument,
    #[error("query `{query_id}` references unknown documents: {ids:?}")]
    UnknownDocId { query_id: String, ids: Vec<String> },
    #[error("duplicate query id `{0}`")]
    DuplicateQuery(String),
    #[error("documents `{0}` and `{1}` render to identical text")]
    TextCollision(String, String),
    #[error("unknown corpus format `{0}` (expected toolbench-json, toole-json or jsonl)")]
    UnknownFormat(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusFormat {
    #[serde(rename = "toolbench-json")]
    ToolBenchJson,
    #[serde(rename = "toole-json")]
    ToolEJson,
    #[serde(rename = "jsonl")]
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toolbench-json" => Ok(Self::ToolBenchJson),
            "toole-json" => Ok(Self::ToolEJson),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// One tool's documentation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolDocument {
    pub doc_id: String,
    /// The input record, field values untouched.
    pub raw: Map<String, Value>,
    /// Flat rendering of `raw`, see [`render_text`].
    pub text: String,
}

impl ToolDocument {
    pub fn new(doc_id: impl Into<String>, raw: Map<String, Value>) -> Result<Self, CorpusError> {
        let text = render_text(&raw)?;
        Ok(Self {
            doc_id: doc_id.into(),
            raw,
            text,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<ToolDocument>,
    pub source_path: String,
}

impl Corpus {
    pub fn from_documents(
        documents: Vec<ToolDocument>,
        source_path: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for doc in &documents {
            if !seen.insert(doc.doc_id.as_str()) {
                return Err(CorpusError::DuplicateId(doc.doc_id.clone()));
            }
        }
        Ok(Self {
            documents,
            source_path: source_path.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&ToolDocument> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    pub fn doc_ids(&self) -> HashSet<&str> {
        self.documents.iter().map(|d| d.doc_id.as_str()).collect()
    }

    /// Writes the canonical JSONL form: one `{"doc_id", "raw", "text"}` per line.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        out.write_all(self.canonical_jsonl().as_bytes())
            .map_err(io_err(path))?;
        out.flush().map_err(io_err(path))
    }

    pub fn canonical_jsonl(&self) -> String {
        let mut buf = String::new();
        for doc in &self.documents {
            let line = CanonicalRecord {
                doc_id: doc.doc_id.clone(),
                raw: doc.raw.clone(),
                text: Some(doc.text.clone()),
            };
            buf.push_str(&serde_json::to_string(&line).expect("serializable record"));
            buf.push('\n');
        }
        buf
    }

    /// Content hash of the canonical form; identifies derived artifacts.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.canonical_jsonl().as_bytes())
    }

    /// Fails if two distinct documents render to the same text.
    pub fn check_render_injective(&self) -> Result<(), CorpusError> {
        let mut by_text: HashMap<&str, &ToolDocument> = HashMap::new();
        for doc in &self.documents {
            if let Some(prev) = by_text.insert(doc.text.as_str(), doc) {
                if prev.raw != doc.raw {
                    return Err(CorpusError::TextCollision(
                        prev.doc_id.clone(),
                        doc.doc_id.clone(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalRecord {
    doc_id: String,
    raw: Map<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let content = std::fs::read_to_string(path).map_err(io_err(path))?;
    let docs = parse_corpus(&content, format)?;
    Corpus::from_documents(docs, path.display().to_string())
}

pub fn parse_corpus(content: &str, format: CorpusFormat) -> Result<Vec<ToolDocument>, CorpusError> {
    let records: Vec<Value> = match format {
        CorpusFormat::ToolBenchJson | CorpusFormat::ToolEJson => {
            let value: Value = serde_json::from_str(content).map_err(|e| CorpusError::Parse {
                index: 0,
                message: e.to_string(),
            })?;
            match value {
                Value::Array(items) => items,
                _ => {
                    return Err(CorpusError::Parse {
                        index: 0,
                        message: "expected a JSON array of records".into(),
                    })
                }
            }
        }
        CorpusFormat::Jsonl => content
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| CorpusError::Parse {
                    index: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?,
    };

    let mut docs = Vec::with_capacity(records.len());
    let mut seen = HashSet::new();
    for (index, record) in records.into_iter().enumerate() {
        let Value::Object(obj) = record else {
            return Err(CorpusError::Parse {
                index,
                message: "record is not a JSON object".into(),
            });
        };
        let (doc_id, raw) = identify(obj, format).map_err(|message| CorpusError::Parse {
            index,
            message,
        })?;
        if !seen.insert(doc_id.clone()) {
            return Err(CorpusError::DuplicateId(doc_id));
        }
        let doc = ToolDocument::new(doc_id, raw).map_err(|e| match e {
            CorpusError::EmptyDocument => CorpusError::Parse {
                index,
                message: "record has no descriptive content".into(),
            },
            other => other,
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

fn identify(
    mut obj: Map<String, Value>,
    format: CorpusFormat,
) -> Result<(String, Map<String, Value>), String> {
    // Canonical line: {"doc_id": ..., "raw": {...}}
    if format == CorpusFormat::Jsonl {
        if let (Some(Value::String(_)), Some(Value::Object(_))) = (obj.get("doc_id"), obj.get("raw")) {
            let rec: CanonicalRecord =
                serde_json::from_value(Value::Object(obj)).map_err(|e| e.to_string())?;
            return Ok((rec.doc_id, rec.raw));
        }
    }
    if let Some(Value::String(id)) = obj.remove("doc_id") {
        return Ok((id, obj));
    }
    let str_field = |k: &str| obj.get(k).and_then(Value::as_str).filter(|s| !s.is_empty());
    let id = match format {
        CorpusFormat::ToolEJson => str_field("name").map(str::to_string),
        _ => match (str_field("tool_name"), str_field("api_name")) {
            (Some(tool), Some(api)) => Some(format!("{tool}::{api}")),
            _ => str_field("name").map(str::to_string),
        },
    };
    id.map(|id| (id, obj))
        .ok_or_else(|| "cannot derive a document id (need tool_name+api_name, name, or doc_id)".into())
}

/// Flattens a record into `field: value` lines.
///
/// Known fields come first in a fixed order, the rest sorted by key.
/// Parameter lists render as `name (type): description` entries joined by `; `.
pub fn render_text(raw: &Map<String, Value>) -> Result<String, CorpusError> {
    let mut keys: Vec<&str> = FIELD_ORDER
        .iter()
        .copied()
        .filter(|k| raw.contains_key(*k))
        .collect();
    let rest: BTreeSet<&str> = raw
        .keys()
        .map(String::as_str)
        .filter(|k| !FIELD_ORDER.contains(k) && !ID_KEYS.contains(k))
        .collect();
    keys.extend(rest);

    let lines: Vec<String> = keys
        .into_iter()
        .filter_map(|k| {
            let value = render_value(&raw[k]);
            (!value.is_empty()).then(|| format!("{k}: {value}"))
        })
        .collect();
    if lines.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    Ok(lines.join("\n"))
}

fn render_value(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.trim().to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|item| match item {
                Value::Object(param) if param.contains_key("name") => render_parameter(param),
                other => render_value(other),
            })
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("; "),
        // serde_json's default map is key-sorted, so this is canonical.
        Value::Object(_) => value.to_string(),
    }
}

fn render_parameter(param: &Map<String, Value>) -> String {
    let name = render_value(&param["name"]);
    let mut out = name;
    if let Some(ty) = param.get("type").map(render_value).filter(|s| !s.is_empty()) {
        out.push_str(&format!(" ({ty})"));
    }
    if let Some(desc) = param
        .get("description")
        .map(render_value)
        .filter(|s| !s.is_empty())
    {
        out.push_str(&format!(": {desc}"));
    }
    let extra: BTreeMap<&str, String> = param
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "name" | "type" | "description"))
        .map(|(k, v)| (k.as_str(), render_value(v)))
        .filter(|(_, v)| !v.is_empty())
        .collect();
    for (k, v) in extra {
        out.push_str(&format!(" [{k}: {v}]"));
    }
    out
}

/// A labeled query with its relevant tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub query_id: String,
    pub query_text: String,
    pub relevant_doc_ids: BTreeSet<String>,
    /// Per-document gain; documents absent here have gain 1.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub grades: BTreeMap<String, f64>,
}

impl EvalExample {
    pub fn gains(&self) -> HashMap<String, f64> {
        self.relevant_doc_ids
            .iter()
            .map(|id| (id.clone(), self.grades.get(id).copied().unwrap_or(1.0)))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct EvalRecord {
    query_id: String,
    query: String,
    relevant_ids: Vec<String>,
    #[serde(default)]
    grades: BTreeMap<String, f64>,
}

/// A query dropped by [`load_eval_dataset_lenient`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedQuery {
    pub query_id: String,
    pub unresolved: Vec<String>,
}

/// Loads a JSONL dataset; any relevant id missing from `corpus` is an error.
pub fn load_eval_dataset(path: &Path, corpus: &Corpus) -> Result<Vec<EvalExample>, CorpusError> {
    let (examples, excluded) = read_eval(path, corpus)?;
    if let Some(first) = excluded.into_iter().next() {
        return Err(CorpusError::UnknownDocId {
            query_id: first.query_id,
            ids: first.unresolved,
        });
    }
    Ok(examples)
}

/// Like [`load_eval_dataset`], but unresolved ids are dropped; queries left
/// with no relevant documents are returned as excluded instead of failing.
pub fn load_eval_dataset_lenient(
    path: &Path,
    corpus: &Corpus,
) -> Result<(Vec<EvalExample>, Vec<ExcludedQuery>), CorpusError> {
    let (mut examples, excluded) = read_eval(path, corpus)?;
    let mut fully_excluded = Vec::new();
    for ex in excluded {
        let e = examples
            .iter()
            .position(|e| e.query_id == ex.query_id)
            .expect("excluded query is in examples");
        if examples[e].relevant_doc_ids.is_empty() {
            examples.remove(e);
            fully_excluded.push(ex);
        } else {
            log::warn!(
                "query {} references unknown documents {:?}; dropped those labels",
                ex.query_id,
                ex.unresolved
            );
        }
    }
    Ok((examples, fully_excluded))
}

fn read_eval(
    path: &Path,
    corpus: &Corpus,
) -> Result<(Vec<EvalExample>, Vec<ExcludedQuery>), CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let known = corpus.doc_ids();
    let mut examples = Vec::new();
    let mut excluded = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            index: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.query_id.clone()) {
            return Err(CorpusError::DuplicateQuery(rec.query_id));
        }
        if rec.relevant_ids.is_empty() {
            return Err(CorpusError::Parse {
                index: i + 1,
                message: "relevant_ids is empty".into(),
            });
        }
        if let Some((id, g)) = rec.grades.iter().find(|(_, g)| g.partial_cmp(&&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(CorpusError::Parse {
                index: i + 1,
                message: format!("grade for `{id}` must be positive, got {g}"),
            });
        }
        let (resolved, unresolved): (Vec<String>, Vec<String>) = rec
            .relevant_ids
            .into_iter()
            .partition(|id| known.contains(id.as_str()));
        if !unresolved.is_empty() {
            excluded.push(ExcludedQuery {
                query_id: rec.query_id.clone(),
                unresolved,
            });
        }
        let relevant_doc_ids: BTreeSet<String> = resolved.into_iter().collect();
        let grades = rec
            .grades
            .into_iter()
            .filter(|(id, _)| relevant_doc_ids.contains(id))
            .collect();
        examples.push(EvalExample {
            query_id: rec.query_id,
            query_text: rec.query,
            relevant_doc_ids,
            grades,
        });
    }
    Ok((examples, excluded))
}
