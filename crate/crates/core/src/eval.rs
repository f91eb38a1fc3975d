//! Retrieval metrics and reports.
//!
//! nDCG@k uses linear gains with a `log2(rank + 1)` discount and truncates
//! the ideal ordering at k (the scikit-learn convention, not trec_eval's).
//! Multi-relevant queries are macro-averaged: each query contributes its
//! own recall, and the report value is the mean over queries.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalExample;
use crate::embedding::Encoder;
use crate::expansion::SyntheticQuery;
use crate::index::{IndexError, ToolIndex};
use crate::rank::rank_by_similarity;
use crate::runfile::RankedList;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("relevance set is empty")]
    EmptyRelevanceSet,
    #[error("run contains query `{0}` which is not in the dataset")]
    UnknownQuery(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ndcg,
    Recall,
    RoundtripRecall,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Ndcg => "ndcg",
            Metric::Recall => "recall",
            Metric::RoundtripRecall => "roundtrip_recall",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub metric: Metric,
    pub k: usize,
    /// Mean of `per_query` when present.
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_query: Option<BTreeMap<String, f64>>,
}

impl EvalReport {
    fn from_per_query(method: &str, metric: Metric, k: usize, per_query: BTreeMap<String, f64>) -> Self {
        let value = if per_query.is_empty() {
            0.0
        } else {
            per_query.values().sum::<f64>() / per_query.len() as f64
        };
        Self {
            method: method.to_string(),
            metric,
            k,
            value,
            per_query: Some(per_query),
        }
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.metric.as_str(), self.k)
    }
}

/// First occurrence of each document within the top `k`.
fn top_k_unique<S: AsRef<str>>(ranked: &[S], k: usize) -> Vec<&str> {
    let mut seen = HashSet::new();
    ranked
        .iter()
        .map(AsRef::as_ref)
        .take(k)
        .filter(|d| seen.insert(*d))
        .collect()
}

pub fn ndcg_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &HashMap<String, f64>,
    k: usize,
) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevanceSet);
    }
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = top_k_unique(ranked, k)
        .into_iter()
        .enumerate()
        .map(|(pos, d)| relevant.get(d).copied().unwrap_or(0.0) * discount(pos))
        .sum();
    let mut ideal: Vec<f64> = relevant.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(pos, g)| g * discount(pos))
        .sum();
    if idcg <= 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

pub fn recall_at_k<S: AsRef<str>>(
    ranked: &[S],
    relevant: &BTreeSet<String>,
    k: usize,
) -> Result<f64, EvalError> {
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevanceSet);
    }
    let hits = top_k_unique(ranked, k)
        .into_iter()
        .filter(|d| relevant.contains(*d))
        .count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Reports for one method over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEvaluation {
    pub method: String,
    pub query_count: usize,
    /// Dataset queries without any ranked list; scored as 0.
    pub missing_queries: usize,
    /// Queries dropped at load time because none of their labels resolved.
    pub excluded_queries: usize,
    pub averaging: String,
    pub reports: Vec<EvalReport>,
}

impl MethodEvaluation {
    pub fn value(&self, metric: Metric, k: usize) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.metric == metric && r.k == k)
            .map(|r| r.value)
    }
}

/// nDCG@k and recall@k for every `k`, one report per (metric, k).
pub fn evaluate_run(
    method: &str,
    lists: &[RankedList],
    dataset: &[EvalExample],
    ks: &[usize],
) -> Result<MethodEvaluation, EvalError> {
    let by_query: HashMap<&str, &EvalExample> =
        dataset.iter().map(|e| (e.query_id.as_str(), e)).collect();
    if let Some(l) = lists.iter().find(|l| !by_query.contains_key(l.query_id.as_str())) {
        return Err(EvalError::UnknownQuery(l.query_id.clone()));
    }
    let runs: HashMap<&str, &RankedList> = lists.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let empty: Vec<String> = Vec::new();
    let missing = dataset
        .iter()
        .filter(|e| !runs.contains_key(e.query_id.as_str()))
        .count();
    if missing > 0 {
        log::warn!("{method}: {missing} dataset queries have no results; scoring them 0");
    }

    let mut reports = Vec::new();
    for metric in [Metric::Ndcg, Metric::Recall] {
        for &k in ks {
            let mut per_query = BTreeMap::new();
            for ex in dataset {
                let ranked = runs
                    .get(ex.query_id.as_str())
                    .map_or(&empty, |l| &l.doc_ids);
                let v = match metric {
                    Metric::Ndcg => ndcg_at_k(ranked, &ex.gains(), k)?,
                    _ => recall_at_k(ranked, &ex.relevant_doc_ids, k)?,
                };
                per_query.insert(ex.query_id.clone(), v);
            }
            reports.push(EvalReport::from_per_query(method, metric, k, per_query));
        }
    }
    Ok(MethodEvaluation {
        method: method.to_string(),
        query_count: dataset.len(),
        missing_queries: missing,
        excluded_queries: 0,
        averaging: "macro (mean of per-query values)".into(),
        reports,
    })
}

/// Fraction of synthetic queries whose generating document is in the
/// top `k` when the query is used as the only intent.
pub fn roundtrip_consistency(
    synthetic: &[SyntheticQuery],
    index: &ToolIndex,
    encoder: &Encoder,
    k: usize,
) -> Result<EvalReport, EvalError> {
    Ok(roundtrip_reports(synthetic, index, encoder, &[k])?.remove(0))
}

/// [`roundtrip_consistency`] for several cut-offs with one ranking pass.
pub fn roundtrip_reports(
    synthetic: &[SyntheticQuery],
    index: &ToolIndex,
    encoder: &Encoder,
    ks: &[usize],
) -> Result<Vec<EvalReport>, EvalError> {
    index.check_encoder(encoder)?;
    let texts: Vec<&str> = synthetic.iter().map(|q| q.text.as_str()).collect();
    let vectors = encoder.encode_queries(&texts).map_err(IndexError::from)?;
    let doc_ids = index.doc_ids();
    let mut positions: Vec<(String, Option<usize>)> = Vec::with_capacity(synthetic.len());
    for (q, v) in synthetic.iter().zip(&vectors) {
        let sims = index.similarities(v)?;
        let ranked = rank_by_similarity(&doc_ids, &sims, doc_ids.len());
        let pos = ranked.iter().position(|d| d.doc_id == q.doc_id);
        positions.push((format!("{}#{}", q.doc_id, q.copy_index), pos));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let per_query = positions
                .iter()
                .map(|(id, pos)| (id.clone(), if pos.is_some_and(|p| p < k) { 1.0 } else { 0.0 }))
                .collect();
            EvalReport::from_per_query("reinvoke", Metric::RoundtripRecall, k, per_query)
        })
        .collect())
}

/// Aligned plain-text table, one row per method, sorted by nDCG@5 (or the
/// first nDCG column when 5 is not among the cut-offs), best first.
pub fn format_table(evals: &[MethodEvaluation]) -> String {
    let mut columns: Vec<(Metric, usize)> = evals
        .iter()
        .flat_map(|e| e.reports.iter().map(|r| (r.metric, r.k)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    columns.sort();
    let sort_col = columns
        .iter()
        .copied()
        .find(|c| *c == (Metric::Ndcg, 5))
        .or_else(|| columns.first().copied());
    let mut rows: Vec<&MethodEvaluation> = evals.iter().collect();
    if let Some((metric, k)) = sort_col {
        rows.sort_by(|a, b| {
            let va = a.value(metric, k).unwrap_or(f64::NEG_INFINITY);
            let vb = b.value(metric, k).unwrap_or(f64::NEG_INFINITY);
            vb.total_cmp(&va).then_with(|| a.method.cmp(&b.method))
        });
    }

    let headers: Vec<String> = std::iter::once("method".to_string())
        .chain(columns.iter().map(|(m, k)| format!("{}@{k}", m.as_str())))
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|e| {
            std::iter::once(e.method.clone())
                .chain(columns.iter().map(|(m, k)| {
                    e.value(*m, *k).map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
                }))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain(std::iter::once(headers[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let fmt_row = |cells: &[String], out: &mut String| {
        let line: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| {
                if c == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
    };
    fmt_row(&headers, &mut out);
    writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
    )
    .expect("write to string");
    for r in &body {
        fmt_row(r, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gains(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
        pairs.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ndcg_examples() {
        let rel = gains(&[("A", 1.0)]);
        assert_eq!(ndcg_at_k(&["A", "B", "C"], &rel, 5).unwrap(), 1.0);
        let v = ndcg_at_k(&["B", "A"], &rel, 5).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&["B", "C"], &rel, 2).unwrap(), 0.0);
    }

    #[test]
    fn ndcg_idcg_truncates_at_k() {
        // Three relevant docs, k = 1: a hit at rank 1 is already ideal.
        let rel = gains(&[("A", 1.0), ("B", 1.0), ("C", 1.0)]);
        assert_eq!(ndcg_at_k(&["A", "x"], &rel, 1).unwrap(), 1.0);
    }

    #[test]
    fn graded_gains() {
        let rel = gains(&[("A", 2.0), ("B", 1.0)]);
        let got = ndcg_at_k(&["B", "A"], &rel, 2).unwrap();
        let dcg = 1.0 + 2.0 / 3f64.log2();
        let idcg = 2.0 + 1.0 / 3f64.log2();
        assert!((got - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&["A"], &set(&["A"]), 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&["x", "A", "y", "z", "w"], &set(&["A", "B"]), 5).unwrap(), 0.5);
    }

    #[test]
    fn empty_relevance_rejected() {
        assert!(matches!(ndcg_at_k(&["A"], &HashMap::new(), 5), Err(EvalError::EmptyRelevanceSet)));
        assert!(matches!(recall_at_k(&["A"], &BTreeSet::new(), 5), Err(EvalError::EmptyRelevanceSet)));
    }

    #[test]
    fn duplicated_docs_count_once() {
        let rel = gains(&[("A", 1.0), ("B", 1.0)]);
        assert_eq!(recall_at_k(&["A", "A"], &set(&["A", "B"]), 2).unwrap(), 0.5);
        assert!(ndcg_at_k(&["A", "A"], &rel, 2).unwrap() < 1.0);
    }

    fn example(qid: &str, rel: &[&str]) -> EvalExample {
        EvalExample {
            query_id: qid.into(),
            query_text: "q".into(),
            relevant_doc_ids: set(rel),
            grades: Default::default(),
        }
    }

    fn list(qid: &str, docs: &[&str]) -> RankedList {
        RankedList {
            query_id: qid.into(),
            doc_ids: docs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn evaluate_perfect_and_empty_runs() {
        let ds = vec![example("1", &["a"]), example("2", &["b", "c"])];
        let perfect = evaluate_run("m", &[list("1", &["a"]), list("2", &["c", "b"])], &ds, &[5]).unwrap();
        assert_eq!(perfect.value(Metric::Ndcg, 5), Some(1.0));
        assert_eq!(perfect.value(Metric::Recall, 5), Some(1.0));

        let miss = evaluate_run("m", &[list("1", &["z"]), list("2", &["y"])], &ds, &[5]).unwrap();
        assert_eq!(miss.value(Metric::Ndcg, 5), Some(0.0));
        assert_eq!(miss.value(Metric::Recall, 5), Some(0.0));
    }

    #[test]
    fn report_is_mean_of_queries() {
        let ds = vec![example("1", &["a"]), example("2", &["b"])];
        let e = evaluate_run("m", &[list("1", &["a"]), list("2", &["z"])], &ds, &[5]).unwrap();
        let r = e.reports.iter().find(|r| r.metric == Metric::Ndcg).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.per_query.as_ref().unwrap()["1"], 1.0);
    }

    #[test]
    fn unknown_query_rejected() {
        let ds = vec![example("1", &["a"])];
        assert!(matches!(
            evaluate_run("m", &[list("nope", &["a"])], &ds, &[5]),
            Err(EvalError::UnknownQuery(_))
        ));
    }

    #[test]
    fn missing_runs_score_zero() {
        let ds = vec![example("1", &["a"]), example("2", &["b"])];
        let e = evaluate_run("m", &[list("1", &["a"])], &ds, &[1]).unwrap();
        assert_eq!(e.missing_queries, 1);
        assert_eq!(e.value(Metric::Recall, 1), Some(0.5));
    }

    #[test]
    fn table_sorted_by_ndcg5() {
        let ds = vec![example("1", &["a"])];
        let weak = evaluate_run("weak", &[list("1", &["z", "a"])], &ds, &[1, 5]).unwrap();
        let strong = evaluate_run("strong", &[list("1", &["a"])], &ds, &[1, 5]).unwrap();
        let table = format_table(&[weak, strong]);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].starts_with("method"));
        assert!(lines[0].contains("ndcg@5") && lines[0].contains("recall@1"));
        assert!(lines[2].starts_with("strong"));
        assert!(lines[3].starts_with("weak"));
        assert!(lines[2].contains("1.0000"));
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_tail_invariant(
            ranked in proptest::collection::vec("[a-h]", 0..12),
            tail in proptest::collection::vec("[a-h]", 0..6),
            rel in proptest::collection::btree_map("[a-h]", 0.5f64..3.0, 1..4),
            k in 1usize..8,
        ) {
            let rel: HashMap<String, f64> = rel.into_iter().collect();
            let rel_set: BTreeSet<String> = rel.keys().cloned().collect();
            let n = ndcg_at_k(&ranked, &rel, k).unwrap();
            let r = recall_at_k(&ranked, &rel_set, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            prop_assert!((0.0..=1.0).contains(&r));

            if ranked.len() >= k {
                let mut head: Vec<String> = ranked.iter().take(k).cloned().collect();
                head.extend(tail);
                prop_assert_eq!(ndcg_at_k(&head, &rel, k).unwrap(), n);
                prop_assert_eq!(recall_at_k(&head, &rel_set, k).unwrap(), r);
            }
        }

        #[test]
        fn ideal_ordering_scores_one(
            rel in proptest::collection::btree_map("[a-h]", 0.5f64..3.0, 1..6),
            k in 1usize..8,
        ) {
            let mut ideal: Vec<(String, f64)> = rel.clone().into_iter().collect();
            ideal.sort_by(|a, b| b.1.total_cmp(&a.1));
            let ranked: Vec<String> = ideal.into_iter().map(|(d, _)| d).collect();
            let rel: HashMap<String, f64> = rel.into_iter().collect();
            prop_assert!((ndcg_at_k(&ranked, &rel, k).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn singleton_recall_iff_positive_ndcg(ranked in proptest::collection::vec("[a-f]", 0..8), k in 1usize..6) {
            let rel = gains(&[("a", 1.0)]);
            let hit = recall_at_k(&ranked, &set(&["a"]), k).unwrap() == 1.0;
            prop_assert_eq!(hit, ndcg_at_k(&ranked, &rel, k).unwrap() > 0.0);
        }
    }
}
