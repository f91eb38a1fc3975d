//! Multi-view similarity ranking.
//!
//! Within each intent, documents get a reversed rank: the least similar
//! document is 1 and the most similar is `|D|`. A document's retrieval key
//! is the lexicographic maximum over intents of `(reversed_rank, sim)`, so
//! every intent's top document carries the largest possible first
//! component and competes for the top of the final list.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// `(reversed_rank, sim)`, ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankKey {
    pub reversed_rank: usize,
    pub sim: f64,
}

impl Eq for RankKey {}

impl Ord for RankKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.reversed_rank
            .cmp(&other.reversed_rank)
            .then_with(|| self.sim.total_cmp(&other.sim))
    }
}

impl PartialOrd for RankKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentScore {
    pub intent_index: u32,
    pub doc_id: String,
    pub sim: f64,
    pub reversed_rank: usize,
}

impl IntentScore {
    pub fn key(&self) -> RankKey {
        RankKey {
            reversed_rank: self.reversed_rank,
            sim: self.sim,
        }
    }
}

/// `rows[i][j]` scores intent `i` against document `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub doc_ids: Vec<String>,
    pub rows: Vec<Vec<IntentScore>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub key: RankKey,
}

/// Reversed ranks for one row of similarities. Ties: the smaller doc_id
/// gets the smaller reversed rank.
pub fn reversed_ranks(doc_ids: &[String], sims: &[f64]) -> Vec<usize> {
    debug_assert_eq!(doc_ids.len(), sims.len());
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| {
        sims[a]
            .total_cmp(&sims[b])
            .then_with(|| doc_ids[a].cmp(&doc_ids[b]))
    });
    let mut ranks = vec![0; sims.len()];
    for (pos, &j) in order.iter().enumerate() {
        ranks[j] = pos + 1;
    }
    ranks
}

/// Builds the score matrix from one similarity row per intent.
pub fn score_rows(doc_ids: &[String], sim_rows: &[Vec<f64>]) -> ScoreMatrix {
    let rows = sim_rows
        .iter()
        .enumerate()
        .map(|(i, sims)| {
            reversed_ranks(doc_ids, sims)
                .into_iter()
                .zip(sims)
                .zip(doc_ids)
                .map(|((reversed_rank, &sim), doc_id)| IntentScore {
                    intent_index: i as u32 + 1,
                    doc_id: doc_id.clone(),
                    sim,
                    reversed_rank,
                })
                .collect()
        })
        .collect();
    ScoreMatrix {
        doc_ids: doc_ids.to_vec(),
        rows,
    }
}

/// Per-document key: the maximum over intents. Empty when there are no rows.
pub fn aggregate_keys(scores: &ScoreMatrix) -> Vec<RankedDoc> {
    if scores.rows.is_empty() {
        return Vec::new();
    }
    scores
        .doc_ids
        .iter()
        .enumerate()
        .map(|(j, doc_id)| RankedDoc {
            doc_id: doc_id.clone(),
            key: scores
                .rows
                .iter()
                .map(|row| row[j].key())
                .max()
                .expect("at least one intent"),
        })
        .collect()
}

/// Top `k` documents by aggregated key, descending; full-key ties go to the
/// smaller doc_id. `k` larger than the corpus returns every document.
pub fn multiview_rank(scores: &ScoreMatrix, k: usize) -> Vec<RankedDoc> {
    let mut docs = aggregate_keys(scores);
    docs.sort_by(|a, b| b.key.cmp(&a.key).then_with(|| a.doc_id.cmp(&b.doc_id)));
    docs.truncate(k);
    docs
}

/// Plain similarity ordering for single-view retrieval. Equal similarities
/// are ordered as their reversed ranks would order them (larger doc_id
/// first), so this agrees with [`multiview_rank`] on one intent.
pub fn rank_by_similarity(doc_ids: &[String], sims: &[f64], k: usize) -> Vec<RankedDoc> {
    let n = sims.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .total_cmp(&sims[a])
            .then_with(|| doc_ids[b].cmp(&doc_ids[a]))
    });
    order
        .into_iter()
        .enumerate()
        .take(k)
        .map(|(pos, j)| RankedDoc {
            doc_id: doc_ids[j].clone(),
            key: RankKey {
                reversed_rank: n - pos,
                sim: sims[j],
            },
        })
        .collect()
}
