//! Online intent extraction: split a user query into standalone
//! tool-related requests with a few-shot prompt.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{GenerationRequest, LlmClient};
use crate::prompts::{fill, INTENT_EXTRACTION_TEMPLATE, USER_QUERY_SLOT};

pub const DEFAULT_MAX_INTENTS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum IntentError {
    #[error("query text is empty")]
    InvalidQuery,
    #[error("response contains no intents")]
    NoIntents,
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed intent record on line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub query_id: String,
    /// 1-based and contiguous within a query.
    pub intent_index: u32,
    /// Single line.
    pub text: String,
}

impl Intent {
    /// The raw query as its only intent; retrieval then matches the
    /// no-extraction configuration.
    pub fn whole_query(query_id: &str, query_text: &str) -> Self {
        Self {
            query_id: query_id.to_string(),
            intent_index: 1,
            text: single_line(query_text),
        }
    }
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn build_intent_prompt(query_text: &str) -> Result<String, IntentError> {
    if query_text.trim().is_empty() {
        return Err(IntentError::InvalidQuery);
    }
    Ok(fill(INTENT_EXTRACTION_TEMPLATE, USER_QUERY_SLOT, query_text))
}

/// One intent per non-empty line, in order, with `Intent:` labels removed.
pub fn parse_intent_response(raw: &str) -> Result<Vec<String>, IntentError> {
    let intents: Vec<String> = raw
        .lines()
        .map(str::trim)
        .map(|line| line.strip_prefix("Intent:").map_or(line, str::trim))
        .filter(|line| !line.is_empty())
        .map(str::to_string)
        .collect();
    if intents.is_empty() {
        return Err(IntentError::NoIntents);
    }
    Ok(intents)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentParams {
    pub max_intents: usize,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for IntentParams {
    fn default() -> Self {
        Self {
            max_intents: DEFAULT_MAX_INTENTS,
            temperature: 0.0,
            max_output_tokens: crate::llm::DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

/// Never fails: an LLM error or unparseable reply yields the raw query as
/// the single intent. An empty query is the only error.
pub fn extract_intents(
    query_id: &str,
    query_text: &str,
    client: &LlmClient,
    params: &IntentParams,
) -> Result<Vec<Intent>, IntentError> {
    let prompt = build_intent_prompt(query_text)?;
    let req = GenerationRequest {
        prompt,
        temperature: params.temperature,
        max_output_tokens: params.max_output_tokens,
        seed: Some(0),
    };
    let lines = match client.generate(&req) {
        Ok(resp) => match parse_intent_response(&resp.text) {
            Ok(lines) => lines,
            Err(e) => {
                log::warn!("query {query_id}: {e}; using the raw query");
                return Ok(vec![Intent::whole_query(query_id, query_text)]);
            }
        },
        Err(e) => {
            log::warn!("query {query_id}: intent extraction failed ({e}); using the raw query");
            return Ok(vec![Intent::whole_query(query_id, query_text)]);
        }
    };

    let mut seen = HashSet::new();
    let intents = lines
        .into_iter()
        .filter(|l| seen.insert(l.clone()))
        .take(params.max_intents.max(1))
        .enumerate()
        .map(|(i, text)| Intent {
            query_id: query_id.to_string(),
            intent_index: i as u32 + 1,
            text,
        })
        .collect();
    Ok(intents)
}

pub fn save_intents(path: &Path, intents: &[Intent]) -> Result<(), IntentError> {
    let io = |e: std::io::Error| IntentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = File::create(path).map_err(io)?;
    for i in intents {
        writeln!(f, "{}", serde_json::to_string(i).expect("serializable intent")).map_err(io)?;
    }
    Ok(())
}

pub fn load_intents(path: &Path) -> Result<Vec<Intent>, IntentError> {
    let io = |e: std::io::Error| IntentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let f = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let intent: Intent = serde_json::from_str(&line).map_err(|e| IntentError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(intent);
    }
    Ok(out)
}
