use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{GenerationRequest, LlmError, TextGenerator};
use crate::embedding::tokenize;
use crate::hashing::stable_u64;
use crate::prompts::{
    extract_any_slot, extract_slot, INTENT_EXTRACTION_TEMPLATE, QUERY_GENERATION_TEMPLATE,
    TOOL_DOCUMENT_SLOT, USER_QUERY_SLOT,
};

/// What the mock emits. Each variant reads the slot value back out of the
/// fixed prompt templates, so the mock works for every pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum MockBehavior {
    /// A window of `terms` tokens from the tool document, starting at a
    /// position derived from (prompt, seed), followed by a `variant <seed>`
    /// marker.
    QueryFromDocument { terms: usize },
    /// Every `[[...]]` segment of the user query on its own line; the whole
    /// query (newlines flattened) when it has none.
    IntentSegments,
    /// The slot value verbatim (or the entire prompt for free-form prompts).
    Echo,
    Fixed { text: String },
    /// Picks per prompt template: `query-from-document` for query
    /// generation, `intent-segments` for intent extraction, `echo` for
    /// anything else. One mock can then drive a whole pipeline.
    ByStage { terms: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "failure", rename_all = "kebab-case")]
pub enum MockFailure {
    /// Every call fails with a 503.
    Unavailable,
    Auth,
    WhenPromptContains(String),
}

#[derive(Debug)]
pub struct MockGenerator {
    behavior: MockBehavior,
    failure: Option<MockFailure>,
    calls: AtomicUsize,
}

impl MockGenerator {
    pub fn new(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            failure: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn failing(mut self, failure: MockFailure) -> Self {
        self.failure = Some(failure);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn respond(&self, prompt: &str, seed: u64) -> String {
        let slot = extract_any_slot(prompt);
        match &self.behavior {
            MockBehavior::QueryFromDocument { terms } => {
                let tokens = tokenize(slot.unwrap_or(prompt));
                if tokens.is_empty() || *terms == 0 {
                    return format!("variant {seed}");
                }
                let start = (stable_u64(&[prompt.as_bytes(), &seed.to_le_bytes()])
                    % tokens.len() as u64) as usize;
                let window: Vec<&str> = (0..(*terms).min(tokens.len()))
                    .map(|i| tokens[(start + i) % tokens.len()].as_str())
                    .collect();
                format!("{} variant {seed}", window.join(" "))
            }
            MockBehavior::IntentSegments => {
                let query = slot.unwrap_or(prompt);
                let segments = bracketed_segments(query);
                if segments.is_empty() {
                    query.split_whitespace().collect::<Vec<_>>().join(" ")
                } else {
                    segments.join("\n")
                }
            }
            MockBehavior::Echo => slot.unwrap_or(prompt).to_string(),
            MockBehavior::Fixed { text } => text.clone(),
            MockBehavior::ByStage { terms } => {
                let stage = if extract_slot(QUERY_GENERATION_TEMPLATE, TOOL_DOCUMENT_SLOT, prompt).is_some() {
                    MockBehavior::QueryFromDocument { terms: *terms }
                } else if extract_slot(INTENT_EXTRACTION_TEMPLATE, USER_QUERY_SLOT, prompt).is_some() {
                    MockBehavior::IntentSegments
                } else {
                    MockBehavior::Echo
                };
                MockGenerator::new(stage).respond(prompt, seed)
            }
        }
    }
}

/// Contents of every `[[...]]` pair, trimmed, in order.
fn bracketed_segments(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("[[") {
        let after = &rest[open + 2..];
        let Some(close) = after.find("]]") else { break };
        let seg = after[..close].split_whitespace().collect::<Vec<_>>().join(" ");
        if !seg.is_empty() {
            out.push(seg);
        }
        rest = &after[close + 2..];
    }
    out
}

impl TextGenerator for MockGenerator {
    fn provider_id(&self) -> String {
        "mock".into()
    }

    fn complete(&self, req: &GenerationRequest) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.failure {
            Some(MockFailure::Unavailable) => {
                return Err(LlmError::Provider {
                    status: Some(503),
                    detail: "mock outage".into(),
                })
            }
            Some(MockFailure::Auth) => return Err(LlmError::Auth("mock credential rejected".into())),
            Some(MockFailure::WhenPromptContains(needle)) if req.prompt.contains(needle) => {
                return Err(LlmError::Provider {
                    status: Some(503),
                    detail: format!("mock failure on `{needle}`"),
                })
            }
            _ => {}
        }
        Ok(self.respond(&req.prompt, req.seed.unwrap_or(0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::*;
    use proptest::prelude::*;

    #[test]
    fn intent_segments_from_brackets() {
        let m = MockGenerator::new(MockBehavior::IntentSegments);
        let prompt = fill(
            INTENT_EXTRACTION_TEMPLATE,
            USER_QUERY_SLOT,
            "I am bored. [[book a flight to SF]] and also [[find restaurants\nin SF]] thanks",
        );
        let out = m.respond(&prompt, 0);
        assert_eq!(out, "book a flight to SF\nfind restaurants in SF");
    }

    #[test]
    fn intent_segments_without_markers_echo_query() {
        let m = MockGenerator::new(MockBehavior::IntentSegments);
        let prompt = fill(INTENT_EXTRACTION_TEMPLATE, USER_QUERY_SLOT, "weather\nin Paris");
        assert_eq!(m.respond(&prompt, 0), "weather in Paris");
    }

    #[test]
    fn echo_returns_slot() {
        let m = MockGenerator::new(MockBehavior::Echo);
        let prompt = fill(HYPOTHETICAL_DOCUMENT_TEMPLATE, USER_QUERY_SLOT, "find a hotel");
        assert_eq!(m.respond(&prompt, 3), "find a hotel");
    }

    #[test]
    fn query_mock_draws_only_document_terms() {
        let m = MockGenerator::new(MockBehavior::QueryFromDocument { terms: 4 });
        let doc = "name: alpha beta\ndescription: gamma delta epsilon";
        let prompt = fill(QUERY_GENERATION_TEMPLATE, TOOL_DOCUMENT_SLOT, doc);
        let vocab = tokenize(doc);
        let out = m.respond(&prompt, 11);
        let toks = tokenize(&out);
        assert_eq!(&toks[toks.len() - 2..], ["variant", "11"]);
        for t in &toks[..toks.len() - 2] {
            assert!(vocab.contains(t), "{t} not from document");
        }
    }

    #[test]
    fn by_stage_dispatches_on_template() {
        let m = MockGenerator::new(MockBehavior::ByStage { terms: 2 });
        let intents = fill(INTENT_EXTRACTION_TEMPLATE, USER_QUERY_SLOT, "x [[a b]] [[c]]");
        assert_eq!(m.respond(&intents, 0), "a b\nc");
        let hyde = fill(HYPOTHETICAL_DOCUMENT_TEMPLATE, USER_QUERY_SLOT, "find a hotel");
        assert_eq!(m.respond(&hyde, 0), "find a hotel");
        let gen = fill(QUERY_GENERATION_TEMPLATE, TOOL_DOCUMENT_SLOT, "alpha beta gamma");
        assert!(m.respond(&gen, 7).ends_with("variant 7"));
    }

    proptest! {
        #[test]
        fn query_mock_distinct_seeds_distinct_outputs(
            doc in "[a-z]{1,8}( [a-z]{1,8}){0,12}",
            s1 in 0u64..10_000,
            s2 in 0u64..10_000,
        ) {
            let m = MockGenerator::new(MockBehavior::QueryFromDocument { terms: 5 });
            let prompt = fill(QUERY_GENERATION_TEMPLATE, TOOL_DOCUMENT_SLOT, &doc);
            let a = m.respond(&prompt, s1);
            prop_assert_eq!(&a, &m.respond(&prompt, s1));
            if s1 != s2 {
                prop_assert_ne!(a, m.respond(&prompt, s2));
            }
        }
    }
}
