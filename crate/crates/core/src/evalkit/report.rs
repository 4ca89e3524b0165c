//! Aggregation and rendering of per-query scores.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const REPORT_COLUMNS: [&str; 8] = ["strategy", "K", "hit_rate", "mrr", "ndcg", "f1", "rouge_l", "sem_score"];

/// Arithmetic mean; an empty slice is an error rather than NaN.
pub fn mean(values: &[f64]) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Scores for one query at one cutoff. Generation metrics are absent when
/// no answer was generated or the query has no reference answer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryScores {
    pub hit: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub f1: Option<f64>,
    pub rouge_l: Option<f64>,
    pub sem_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub strategy: String,
    pub k: usize,
    pub queries: usize,
    pub hit_rate: f64,
    pub mrr: f64,
    pub ndcg: f64,
    pub f1: Option<f64>,
    pub rouge_l: Option<f64>,
    pub sem_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// `(strategy, error)` for strategies that produced no scores.
    pub failures: Vec<(String, String)>,
}

/// Collects per-query scores keyed by (strategy, K). Rows come out in
/// first-seen strategy order, then ascending K.
#[derive(Debug, Default)]
pub struct ReportBuilder {
    cells: Vec<(String, usize, Vec<QueryScores>)>,
    failures: Vec<(String, String)>,
}

impl ReportBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, strategy: &str, k: usize, scores: QueryScores) {
        match self.cells.iter_mut().find(|(s, ck, _)| s == strategy && *ck == k) {
            Some((_, _, v)) => v.push(scores),
            None => self.cells.push((strategy.to_string(), k, vec![scores])),
        }
    }

    pub fn fail(&mut self, strategy: &str, error: impl ToString) {
        self.failures.push((strategy.to_string(), error.to_string()));
    }

    pub fn finish(self) -> Result<MetricReport, EvalError> {
        let order: Vec<String> = {
            let mut seen: Vec<String> = Vec::new();
            for (s, _, _) in &self.cells {
                if !seen.contains(s) {
                    seen.push(s.clone());
                }
            }
            seen
        };
        let mut cells = self.cells;
        cells.sort_by_key(|(s, k, _)| (order.iter().position(|o| o == s), *k));
        let rows = cells
            .into_iter()
            .map(|(strategy, k, scores)| aggregate(strategy, k, &scores))
            .collect::<Result<_, _>>()?;
        Ok(MetricReport {
            rows,
            failures: self.failures,
        })
    }
}

fn optional_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    mean(&present).ok()
}

/// Means over the queries of one cell. Generation metrics average over the
/// queries that have them.
pub fn aggregate(strategy: String, k: usize, scores: &[QueryScores]) -> Result<MetricRow, EvalError> {
    let col = |f: fn(&QueryScores) -> f64| mean(&scores.iter().map(f).collect::<Vec<_>>());
    Ok(MetricRow {
        strategy,
        k,
        queries: scores.len(),
        hit_rate: col(|s| s.hit)?,
        mrr: col(|s| s.mrr)?,
        ndcg: col(|s| s.ndcg)?,
        f1: optional_mean(scores.iter().map(|s| s.f1)),
        rouge_l: optional_mean(scores.iter().map(|s| s.rouge_l)),
        sem_score: optional_mean(scores.iter().map(|s| s.sem_score)),
    })
}

fn cell(v: Option<f64>, places: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.places$}"))
}

impl MetricRow {
    fn cells(&self, places: usize) -> [String; 8] {
        [
            self.strategy.clone(),
            self.k.to_string(),
            cell(Some(self.hit_rate), places),
            cell(Some(self.mrr), places),
            cell(Some(self.ndcg), places),
            cell(self.f1, places),
            cell(self.rouge_l, places),
            cell(self.sem_score, places),
        ]
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricReport {
    /// Six decimal places; missing generation metrics are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells = row.cells(6).map(|c| if c == "-" { String::new() } else { csv_field(&c) });
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Aligned table with four decimals and footnotes.
    pub fn to_text_table(&self) -> String {
        let rows: Vec<[String; 8]> = self.rows.iter().map(|r| r.cells(4)).collect();
        let mut widths = REPORT_COLUMNS.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&REPORT_COLUMNS.map(String::from));
        line(&widths.map(|w| "-".repeat(w)));
        for r in &rows {
            line(r);
        }
        out.push('\n');
        out.push_str("* mrr counts a query with no relevant chunk in the top K as 0.\n");
        out.push_str("* sem_score is greedy token matching under the configured embedder.\n");
        if let Some(n) = self.rows.first().map(|r| r.queries) {
            let _ = writeln!(out, "* {n} queries per row.");
        }
        for (strategy, err) in &self.failures {
            let _ = writeln!(out, "* {strategy} failed and is omitted: {err}");
        }
        out
    }
}
