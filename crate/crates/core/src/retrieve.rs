//! Query-time retrieval: the expanded multi-view method and three baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Encoder, EncoderKind};
use crate::index::{IndexError, ToolIndex};
use crate::intent::{extract_intents, Intent, IntentError, IntentParams};
use crate::llm::{GenerationRequest, LlmClient};
use crate::prompts::{fill, HYPOTHETICAL_DOCUMENT_TEMPLATE, USER_QUERY_SLOT};
use crate::rank::{multiview_rank, rank_by_similarity, RankedDoc, ScoreMatrix};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Intent(#[from] IntentError),
    #[error("method `{0}` is not configured")]
    NotConfigured(Method),
    #[error("unknown retrieval method `{0}`")]
    UnknownMethod(String),
    #[error("k must be positive")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Reinvoke,
    Bm25,
    Dense,
    Hyde,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Reinvoke, Method::Bm25, Method::Dense, Method::Hyde];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Reinvoke => "reinvoke",
            Method::Bm25 => "bm25",
            Method::Dense => "dense",
            Method::Hyde => "hyde",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = RetrieveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RetrieveError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub method: Method,
    /// Sorted by key, best first.
    pub ranked: Vec<RankedDoc>,
}

impl RetrievalResult {
    pub fn doc_ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|d| d.doc_id.as_str()).collect()
    }
}

fn clamp_k(k: usize, index: &ToolIndex) -> Result<usize, RetrieveError> {
    if k == 0 {
        return Err(RetrieveError::ZeroK);
    }
    if k > index.len() {
        log::warn!("k = {k} exceeds the {} indexed tools; returning all", index.len());
    }
    Ok(k.min(index.len()))
}

/// Ranks `index` against already-extracted intents.
pub fn reinvoke_rank(
    query_id: &str,
    intents: &[Intent],
    index: &ToolIndex,
    encoder: &Encoder,
    k: usize,
) -> Result<(RetrievalResult, ScoreMatrix), RetrieveError> {
    index.check_encoder(encoder)?;
    let k = clamp_k(k, index)?;
    let texts: Vec<&str> = intents.iter().map(|i| i.text.as_str()).collect();
    let vectors = encoder
        .encode_queries(&texts)
        .map_err(IndexError::from)?;
    let scores = index.score_intents(&vectors)?;
    let ranked = multiview_rank(&scores, k);
    Ok((
        RetrievalResult {
            query_id: query_id.to_string(),
            method: Method::Reinvoke,
            ranked,
        },
        scores,
    ))
}

/// Single-view retrieval of `text` against `index`.
pub fn similarity_rank(
    query_id: &str,
    text: &str,
    index: &ToolIndex,
    encoder: &Encoder,
    k: usize,
    method: Method,
) -> Result<RetrievalResult, RetrieveError> {
    index.check_encoder(encoder)?;
    let k = clamp_k(k, index)?;
    let query = encoder
        .encode_queries(&[text])
        .map_err(IndexError::from)?
        .remove(0);
    let sims = index.similarities(&query)?;
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        method,
        ranked: rank_by_similarity(&index.doc_ids(), &sims, k),
    })
}

pub fn build_hyde_prompt(query_text: &str) -> String {
    fill(HYPOTHETICAL_DOCUMENT_TEMPLATE, USER_QUERY_SLOT, query_text)
}

/// Generates a hypothetical tool document for the query and ranks the real
/// (unexpanded) documents by similarity to it. Generation failures fall
/// back to ranking by the query itself.
pub fn hyde_retrieve(
    query_id: &str,
    query_text: &str,
    index: &ToolIndex,
    encoder: &Encoder,
    client: &LlmClient,
    k: usize,
) -> Result<RetrievalResult, RetrieveError> {
    let req = GenerationRequest::new(build_hyde_prompt(query_text), 0.0).with_seed(0);
    let text = match client.generate(&req) {
        Ok(resp) if !resp.text.trim().is_empty() => resp.text,
        Ok(_) => {
            log::warn!("query {query_id}: empty hypothetical document; using the query");
            query_text.to_string()
        }
        Err(e) => {
            log::warn!("query {query_id}: hypothetical document generation failed ({e}); using the query");
            query_text.to_string()
        }
    };
    similarity_rank(query_id, &text, index, encoder, k, Method::Hyde)
}

/// An index together with the encoder that reads it.
#[derive(Debug, Clone)]
pub struct EncodedIndex {
    pub index: ToolIndex,
    pub encoder: Encoder,
}

impl EncodedIndex {
    pub fn new(index: ToolIndex, encoder: Encoder) -> Result<Self, IndexError> {
        index.check_encoder(&encoder)?;
        Ok(Self { index, encoder })
    }
}

/// How the multi-view method obtains intents.
#[derive(Debug, Clone)]
pub enum IntentSource {
    /// The raw query is the single intent.
    Disabled,
    Llm { client: LlmClient, params: IntentParams },
}

/// Everything needed to answer queries with any configured method.
#[derive(Debug, Clone)]
pub struct Retriever {
    /// Index over expanded copies.
    pub reinvoke: Option<EncodedIndex>,
    /// Raw-document indexes, keyed by encoder.
    pub raw_bm25: Option<EncodedIndex>,
    pub raw_dense: Option<EncodedIndex>,
    pub intents: IntentSource,
    pub hyde_client: Option<LlmClient>,
    /// Which raw index HyDE ranks against.
    pub hyde_encoder: EncoderKind,
}

/// The multi-view method's intermediate state for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub intents: Vec<Intent>,
    pub scores: ScoreMatrix,
    pub result: RetrievalResult,
}

impl Retriever {
    pub fn intents_for(&self, query_id: &str, query_text: &str) -> Result<Vec<Intent>, RetrieveError> {
        match &self.intents {
            IntentSource::Disabled => {
                if query_text.trim().is_empty() {
                    return Err(IntentError::InvalidQuery.into());
                }
                Ok(vec![Intent::whole_query(query_id, query_text)])
            }
            IntentSource::Llm { client, params } => {
                Ok(extract_intents(query_id, query_text, client, params)?)
            }
        }
    }

    pub fn explain(&self, query_id: &str, query_text: &str, k: usize) -> Result<Explanation, RetrieveError> {
        let ei = self
            .reinvoke
            .as_ref()
            .ok_or(RetrieveError::NotConfigured(Method::Reinvoke))?;
        let intents = self.intents_for(query_id, query_text)?;
        let (result, scores) = reinvoke_rank(query_id, &intents, &ei.index, &ei.encoder, k)?;
        Ok(Explanation {
            intents,
            scores,
            result,
        })
    }

    pub fn retrieve(
        &self,
        query_id: &str,
        query_text: &str,
        k: usize,
        method: Method,
    ) -> Result<RetrievalResult, RetrieveError> {
        match method {
            Method::Reinvoke => Ok(self.explain(query_id, query_text, k)?.result),
            Method::Bm25 => {
                let ei = self.raw_bm25.as_ref().ok_or(RetrieveError::NotConfigured(method))?;
                similarity_rank(query_id, query_text, &ei.index, &ei.encoder, k, method)
            }
            Method::Dense => {
                let ei = self.raw_dense.as_ref().ok_or(RetrieveError::NotConfigured(method))?;
                similarity_rank(query_id, query_text, &ei.index, &ei.encoder, k, method)
            }
            Method::Hyde => {
                let client = self.hyde_client.as_ref().ok_or(RetrieveError::NotConfigured(method))?;
                let ei = match self.hyde_encoder {
                    EncoderKind::Bm25 => self.raw_bm25.as_ref(),
                    EncoderKind::Dense => self.raw_dense.as_ref(),
                }
                .ok_or(RetrieveError::NotConfigured(method))?;
                hyde_retrieve(query_id, query_text, &ei.index, &ei.encoder, client, k)
            }
        }
    }
}
