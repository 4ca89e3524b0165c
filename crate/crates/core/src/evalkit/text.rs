//! Answer-quality metrics over normalized tokens.

use std::collections::HashMap;

use crate::composer::{cosine, Embedder, EmbeddingVector};

use super::EvalError;

/// Lowercase, drop punctuation, split on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Multiset token-overlap F1. Two empty texts score 1, one empty text 0.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let pred = normalize_tokens(prediction);
    let refs = normalize_tokens(reference);
    match (pred.is_empty(), refs.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &refs {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    f_measure(
        common as f64 / pred.len() as f64,
        common as f64 / refs.len() as f64,
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta = 1) over normalized tokens.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let pred = normalize_tokens(prediction);
    let refs = normalize_tokens(reference);
    match (pred.is_empty(), refs.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let lcs = lcs_len(&pred, &refs) as f64;
    f_measure(lcs / pred.len() as f64, lcs / refs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemParts {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Greedy token matching under an embedder: each prediction token takes its
/// best cosine against the reference tokens (precision), and vice versa
/// (recall). An embedding-space stand-in for BERTScore, not a replica.
pub fn sem_score_parts(prediction: &str, reference: &str, embedder: &dyn Embedder) -> Result<SemParts, EvalError> {
    let pred = normalize_tokens(prediction);
    let refs = normalize_tokens(reference);
    match (pred.is_empty(), refs.is_empty()) {
        (true, true) => {
            return Ok(SemParts {
                precision: 1.0,
                recall: 1.0,
                f: 1.0,
            })
        }
        (true, false) | (false, true) => {
            return Ok(SemParts {
                precision: 0.0,
                recall: 0.0,
                f: 0.0,
            })
        }
        _ => {}
    }

    let mut vocab: Vec<&str> = pred.iter().chain(&refs).map(String::as_str).collect();
    vocab.sort_unstable();
    vocab.dedup();
    let vectors = embedder.embed_batch(&vocab)?;
    let table: HashMap<&str, &EmbeddingVector> = vocab.iter().copied().zip(&vectors).collect();

    let side = |from: &[String], to: &[String]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|a| {
                to.iter()
                    .map(|b| cosine(table[a.as_str()], table[b.as_str()]))
                    .fold(f64::NEG_INFINITY, f64::max)
                    .clamp(0.0, 1.0)
            })
            .sum();
        total / from.len() as f64
    };
    let precision = side(&pred, &refs);
    let recall = side(&refs, &pred);
    Ok(SemParts {
        precision,
        recall,
        f: f_measure(precision, recall).clamp(0.0, 1.0),
    })
}

pub fn sem_score(prediction: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64, EvalError> {
    sem_score_parts(prediction, reference, embedder).map(|p| p.f)
}
