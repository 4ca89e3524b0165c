//! Retrieval and generation scoring.
//!
//! Gold evidence is a set of character spans, so the same query set scores
//! every chunking strategy. A retrieved chunk is relevant when it covers at
//! least `min_overlap` of some gold span. For NDCG each gold span can be
//! claimed by one hit only (the highest ranked one covering it), which keeps
//! overlapping windows from inflating DCG past the ideal.

mod report;
mod text;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composer::EmbedError;
use crate::corpus::Span;

pub use report::{aggregate, mean, MetricReport, MetricRow, QueryScores, ReportBuilder, REPORT_COLUMNS};
pub use text::{normalize_tokens, rouge_l, sem_score, sem_score_parts, token_f1, SemParts};

pub const DEFAULT_MIN_OVERLAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("unknown query `{0}`")]
    UnknownQuery(String),
    #[error("k = {k} exceeds run depth {depth}")]
    KExceedsDepth { k: usize, depth: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query `{0}` has no gold spans")]
    NoGold(String),
    #[error("no queries to aggregate")]
    EmptyQuerySet,
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed query record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldSpan {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
}

impl GoldSpan {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    #[serde(rename = "gold")]
    pub gold_spans: Vec<GoldSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
}

/// Reads a line-delimited query file.
pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>, EvalError> {
    let raw = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_queries(&raw)
}

pub fn parse_queries(raw: &str) -> Result<Vec<QueryRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRecord = serde_json::from_str(line).map_err(|e| EvalError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(bad) = q.gold_spans.iter().find(|g| g.end < g.start) {
            return Err(EvalError::Malformed {
                line: i + 1,
                message: format!("gold span {}..{} is reversed", bad.start, bad.end),
            });
        }
        out.push(q);
    }
    Ok(out)
}

/// A retrieved chunk resolved to its position in the source text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedHit {
    pub id: String,
    pub doc_id: String,
    pub char_span: Span,
    pub score: f64,
    pub rank: usize,
}

/// Ranked lists for a query set under one strategy, each at most `depth` long.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub strategy: String,
    pub depth: usize,
    pub min_overlap: f64,
    pub hits: BTreeMap<String, Vec<RetrievedHit>>,
}

impl RetrievalRun {
    pub fn new(strategy: impl Into<String>, depth: usize) -> Self {
        Self {
            strategy: strategy.into(),
            depth,
            min_overlap: DEFAULT_MIN_OVERLAP,
            hits: BTreeMap::new(),
        }
    }

    /// Records a ranked list, truncating it to the run depth.
    pub fn record(&mut self, query_id: impl Into<String>, mut hits: Vec<RetrievedHit>) {
        hits.truncate(self.depth);
        self.hits.insert(query_id.into(), hits);
    }

    fn ranked(&self, query: &QueryRecord, k: usize) -> Result<&[RetrievedHit], EvalError> {
        if k < 1 {
            return Err(EvalError::InvalidK);
        }
        if k > self.depth {
            return Err(EvalError::KExceedsDepth { k, depth: self.depth });
        }
        let hits = self
            .hits
            .get(&query.query_id)
            .ok_or_else(|| EvalError::UnknownQuery(query.query_id.clone()))?;
        Ok(&hits[..k.min(hits.len())])
    }
}

/// Gold spans (by index) that the chunk covers to at least `min_overlap`.
fn covered<'a>(doc_id: &str, span: Span, gold: &'a [GoldSpan], min_overlap: f64) -> impl Iterator<Item = usize> + 'a {
    let doc_id = doc_id.to_string();
    gold.iter().enumerate().filter_map(move |(i, g)| {
        if g.doc_id != doc_id {
            return None;
        }
        let gs = g.span();
        let covered = if gs.is_empty() {
            // a point span counts when the chunk contains it
            span.start <= gs.start && gs.start < span.end
        } else {
            span.intersection_len(&gs) as f64 / gs.len() as f64 >= min_overlap
        };
        covered.then_some(i)
    })
}

/// True iff the chunk covers at least `min_overlap` of some gold span.
pub fn is_relevant(doc_id: &str, span: Span, gold: &[GoldSpan], min_overlap: f64) -> bool {
    covered(doc_id, span, gold, min_overlap).next().is_some()
}

/// Per-hit relevance flags.
pub fn relevance(hits: &[RetrievedHit], gold: &[GoldSpan], min_overlap: f64) -> Vec<bool> {
    hits.iter()
        .map(|h| is_relevant(&h.doc_id, h.char_span, gold, min_overlap))
        .collect()
}

/// Binary gains where each gold span is credited to at most one hit.
pub fn claimed_gains(hits: &[RetrievedHit], gold: &[GoldSpan], min_overlap: f64) -> Vec<bool> {
    let mut claimed = vec![false; gold.len()];
    hits.iter()
        .map(|h| {
            let free = covered(&h.doc_id, h.char_span, gold, min_overlap).find(|&g| !claimed[g]);
            if let Some(g) = free {
                claimed[g] = true;
            }
            free.is_some()
        })
        .collect()
}

pub fn hit_from_relevance(rel: &[bool], k: usize) -> f64 {
    if rel.iter().take(k).any(|&r| r) {
        1.0
    } else {
        0.0
    }
}

pub fn mrr_from_relevance(rel: &[bool], k: usize) -> f64 {
    rel.iter()
        .take(k)
        .position(|&r| r)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// DCG over the first `k` gains divided by the DCG of `min(k, n_gold)`
/// leading ones.
pub fn ndcg_from_gains(gains: &[bool], k: usize, n_gold: usize) -> f64 {
    let dcg: f64 = gains
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &g)| g)
        .map(|(i, _)| discount(i + 1))
        .sum();
    let idcg: f64 = (1..=k.min(n_gold)).map(discount).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

pub fn hit_at_k(run: &RetrievalRun, query: &QueryRecord, k: usize) -> Result<f64, EvalError> {
    let hits = run.ranked(query, k)?;
    Ok(hit_from_relevance(&relevance(hits, &query.gold_spans, run.min_overlap), k))
}

pub fn mrr_at_k(run: &RetrievalRun, query: &QueryRecord, k: usize) -> Result<f64, EvalError> {
    let hits = run.ranked(query, k)?;
    Ok(mrr_from_relevance(&relevance(hits, &query.gold_spans, run.min_overlap), k))
}

pub fn ndcg_at_k(run: &RetrievalRun, query: &QueryRecord, k: usize) -> Result<f64, EvalError> {
    let hits = run.ranked(query, k)?;
    if query.gold_spans.is_empty() {
        return Err(EvalError::NoGold(query.query_id.clone()));
    }
    let gains = claimed_gains(hits, &query.gold_spans, run.min_overlap);
    Ok(ndcg_from_gains(&gains, k, query.gold_spans.len()))
}
