//! Unsupervised tool retrieval.
//!
//! Tool documents are expanded offline with LLM-generated synthetic
//! queries; user queries are split online into tool-related intents; tools
//! are ranked by the lexicographic maximum over intents of
//! (reversed rank, similarity), so the best tool for every intent reaches
//! the top of the list.

pub mod corpus;
pub mod embedding;
pub mod expansion;
pub mod hashing;
mod http;
pub mod intent;
pub mod llm;
pub mod prompts;
pub mod index;
pub mod rank;
pub mod retrieve;
pub mod runfile;
pub mod eval;
pub mod pipeline;
