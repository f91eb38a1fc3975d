//! TREC-style run files: one `query_id doc_id rank score method` line per
//! retrieved document, whitespace separated, rank starting at 1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::retrieve::RetrievalResult;

#[derive(Debug, Error)]
pub enum RunFileError {
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("identifier `{0}` contains whitespace and cannot be written to a run file")]
    Whitespace(String),
}

/// Ranked document ids for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub doc_ids: Vec<String>,
}

impl From<&RetrievalResult> for RankedList {
    fn from(r: &RetrievalResult) -> Self {
        Self {
            query_id: r.query_id.clone(),
            doc_ids: r.ranked.iter().map(|d| d.doc_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub method: String,
    pub lists: Vec<RankedList>,
}

fn check_token(s: &str) -> Result<(), RunFileError> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(RunFileError::Whitespace(s.to_string()));
    }
    Ok(())
}

pub fn format_run(results: &[RetrievalResult]) -> Result<String, RunFileError> {
    let mut out = String::new();
    for r in results {
        check_token(&r.query_id)?;
        for (pos, d) in r.ranked.iter().enumerate() {
            check_token(&d.doc_id)?;
            writeln!(out, "{} {} {} {} {}", r.query_id, d.doc_id, pos + 1, d.key.sim, r.method)
                .expect("write to string");
        }
    }
    Ok(out)
}

pub fn write_run(path: &Path, results: &[RetrievalResult]) -> Result<(), RunFileError> {
    let text = format_run(results)?;
    std::fs::write(path, text).map_err(|e| RunFileError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn parse_run(text: &str) -> Result<Run, RunFileError> {
    let mut method: Option<String> = None;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, String)>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [qid, doc, rank, score, m] = fields[..] else {
            return Err(RunFileError::Parse {
                line: line_no,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        };
        let rank: usize = rank.parse().map_err(|_| RunFileError::Parse {
            line: line_no,
            message: format!("bad rank `{rank}`"),
        })?;
        score.parse::<f64>().map_err(|_| RunFileError::Parse {
            line: line_no,
            message: format!("bad score `{score}`"),
        })?;
        match &method {
            None => method = Some(m.to_string()),
            Some(prev) if prev != m => {
                return Err(RunFileError::Parse {
                    line: line_no,
                    message: format!("mixed methods `{prev}` and `{m}`"),
                })
            }
            _ => {}
        }
        if !rows.contains_key(qid) {
            order.push(qid.to_string());
        }
        rows.entry(qid.to_string()).or_default().push((rank, doc.to_string()));
    }
    let lists = order
        .into_iter()
        .map(|qid| {
            let mut docs = rows.remove(&qid).expect("query seen");
            docs.sort_by_key(|(rank, _)| *rank);
            RankedList {
                query_id: qid,
                doc_ids: docs.into_iter().map(|(_, d)| d).collect(),
            }
        })
        .collect();
    Ok(Run {
        method: method.unwrap_or_default(),
        lists,
    })
}

pub fn read_run(path: &Path) -> Result<Run, RunFileError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunFileError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_run(&text)
}
