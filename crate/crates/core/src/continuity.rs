//! Sequential continuity chain.
//!
//! Chunk 0 of a document is always extracted. For every later chunk the
//! model judges whether it continues its predecessor: a TRUE verdict copies
//! the predecessor's signature, a FALSE verdict extracts a fresh one.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::cnm::{json_object_slice, Cnm, Extraction, Extractor};
use crate::corpus::Chunk;
use crate::llm_gateway::{prompt_digest, ChatRequest, Gateway, GatewayError};
use crate::prompts::{tail_chars, truncate_chars, CONTINUITY};

/// Characters of context shown to the judge from each side of a boundary.
pub const DEFAULT_ANCHOR_CAP: usize = 600;

#[derive(Debug, Error)]
pub enum ContinuityError {
    #[error("chunk {chunk_id} is out of order: expected seq_index {expected}")]
    OutOfOrder { chunk_id: String, expected: usize },
    #[error("chunk {chunk_id} belongs to `{found}`, chain is over `{expected}`")]
    MixedDocuments {
        chunk_id: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    True,
    False,
}

impl Verdict {
    pub fn is_same(self) -> bool {
        self == Verdict::True
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::True => "TRUE",
            Verdict::False => "FALSE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuityDecision {
    pub value: Verdict,
    /// Reply the verdict was taken from (the corrective reply when one was needed).
    pub raw_response: String,
    pub pair: (String, String),
    /// True when no reply could be parsed and the conservative default applied.
    pub defaulted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchor {
    pub text: String,
    pub source_chunk_id: String,
}

impl Anchor {
    /// The last `cap` characters of the chunk.
    pub fn from_chunk(chunk: &Chunk, cap: usize) -> Self {
        Self {
            text: tail_chars(&chunk.text, cap).to_string(),
            source_chunk_id: chunk.chunk_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CnmOrigin {
    Inherited,
    Extracted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedChunk {
    pub chunk: Chunk,
    pub cnm: Cnm,
    pub cnm_origin: CnmOrigin,
    pub decision: Option<ContinuityDecision>,
}

/// Builds the decision prompt. Both texts are capped at `cap` characters:
/// the anchor should already be a tail excerpt, the current text keeps its
/// head.
pub fn build_cd_prompt(anchor: &Anchor, cur_text: &str, cap: usize) -> String {
    CONTINUITY.fill(&[
        ("anchor", tail_chars(&anchor.text, cap)),
        ("current", truncate_chars(cur_text, cap)),
    ])
}

/// Accepts `{"same": true|false}` (booleans or their string forms) or a bare
/// `true`/`false`, case-insensitive, after trimming.
pub fn parse_decision(raw: &str) -> Option<Verdict> {
    let verdict = |b: bool| if b { Verdict::True } else { Verdict::False };
    let bare = |s: &str| match s.trim().to_ascii_lowercase().as_str() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    };
    if let Some(slice) = json_object_slice(raw) {
        if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(slice) {
            return match obj.get("same") {
                Some(Value::Bool(b)) => Some(verdict(*b)),
                Some(Value::String(s)) => bare(s).map(verdict),
                _ => None,
            };
        }
    }
    bare(raw.trim().trim_matches('`')).map(verdict)
}

fn corrective_prompt(prompt: &str) -> String {
    format!(
        "{prompt}\n\nYour previous reply could not be read. Answer with exactly {{\"same\": true}} \
         or {{\"same\": false}}."
    )
}

fn check_pair(prev: &Chunk, cur: &Chunk) -> Result<(), ContinuityError> {
    if prev.doc_id != cur.doc_id {
        return Err(ContinuityError::MixedDocuments {
            chunk_id: cur.chunk_id.clone(),
            expected: prev.doc_id.clone(),
            found: cur.doc_id.clone(),
        });
    }
    if prev.seq_index + 1 != cur.seq_index {
        return Err(ContinuityError::OutOfOrder {
            chunk_id: cur.chunk_id.clone(),
            expected: prev.seq_index + 1,
        });
    }
    Ok(())
}

/// Judges whether `cur` continues `prev`. One corrective re-prompt is issued
/// on an unreadable reply; if that also fails the verdict defaults to TRUE.
pub fn decide_continuity(
    prev: &Chunk,
    cur: &Chunk,
    gateway: &Gateway,
    anchor_cap: usize,
) -> Result<ContinuityDecision, ContinuityError> {
    check_pair(prev, cur)?;
    let pair = (prev.chunk_id.clone(), cur.chunk_id.clone());
    let prompt = build_cd_prompt(&Anchor::from_chunk(prev, anchor_cap), &cur.text, anchor_cap);

    let first = gateway.complete(&ChatRequest::new(prompt.as_str()))?;
    if let Some(value) = parse_decision(&first.text) {
        return Ok(ContinuityDecision {
            value,
            raw_response: first.text,
            pair,
            defaulted: false,
        });
    }
    let second = gateway.complete(&ChatRequest::new(corrective_prompt(&prompt)))?;
    match parse_decision(&second.text) {
        Some(value) => Ok(ContinuityDecision {
            value,
            raw_response: second.text,
            pair,
            defaulted: false,
        }),
        None => {
            warn!(prev = %pair.0, cur = %pair.1, "unreadable continuity verdict, defaulting to TRUE");
            Ok(ContinuityDecision {
                value: Verdict::True,
                raw_response: second.text,
                pair,
                defaulted: true,
            })
        }
    }
}

/// TRUE copies `prev_cnm` without touching the extractor; FALSE extracts.
pub fn propagate_cnm(
    prev_cnm: &Cnm,
    decision: &ContinuityDecision,
    cur: &Chunk,
    extractor: &dyn Extractor,
) -> Result<(Cnm, CnmOrigin), GatewayError> {
    match decision.value {
        Verdict::True => Ok((prev_cnm.clone(), CnmOrigin::Inherited)),
        Verdict::False => Ok((extractor.extract(cur)?.cnm, CnmOrigin::Extracted)),
    }
}

/// Tallies for run manifests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub extractions: u64,
    pub decisions: u64,
    pub false_decisions: u64,
    pub defaulted_decisions: u64,
    pub fallbacks: u64,
}

impl ChainStats {
    pub fn merge(&mut self, other: &ChainStats) {
        self.extractions += other.extractions;
        self.decisions += other.decisions;
        self.false_decisions += other.false_decisions;
        self.defaulted_decisions += other.defaulted_decisions;
        self.fallbacks += other.fallbacks;
    }
}

/// Extractor wrapper that counts extractions and fallbacks.
struct Tally<'a> {
    inner: &'a dyn Extractor,
    stats: std::cell::RefCell<ChainStats>,
}

impl Extractor for Tally<'_> {
    fn extract(&self, chunk: &Chunk) -> Result<Extraction, GatewayError> {
        let ex = self.inner.extract(chunk)?;
        let mut s = self.stats.borrow_mut();
        s.extractions += 1;
        s.fallbacks += u64::from(ex.fell_back);
        Ok(ex)
    }
}

/// Runs the chain over one document's chunks, in order.
///
/// `on_chunk` sees each annotated chunk as soon as its signature is final,
/// which lets callers start downstream work before the chain finishes.
pub fn run_chain_with(
    chunks: &[Chunk],
    gateway: &Gateway,
    extractor: &dyn Extractor,
    anchor_cap: usize,
    mut on_chunk: impl FnMut(&AnnotatedChunk),
) -> Result<(Vec<AnnotatedChunk>, ChainStats), ContinuityError> {
    let tally = Tally {
        inner: extractor,
        stats: Default::default(),
    };
    let mut out: Vec<AnnotatedChunk> = Vec::with_capacity(chunks.len());
    for (i, chunk) in chunks.iter().enumerate() {
        let annotated = match out.last() {
            None => {
                if chunk.seq_index != 0 {
                    return Err(ContinuityError::OutOfOrder {
                        chunk_id: chunk.chunk_id.clone(),
                        expected: 0,
                    });
                }
                AnnotatedChunk {
                    chunk: chunk.clone(),
                    cnm: tally.extract(chunk)?.cnm,
                    cnm_origin: CnmOrigin::Extracted,
                    decision: None,
                }
            }
            Some(prev) => {
                let decision = decide_continuity(&chunks[i - 1], chunk, gateway, anchor_cap)?;
                {
                    let mut s = tally.stats.borrow_mut();
                    s.decisions += 1;
                    s.false_decisions += u64::from(!decision.value.is_same());
                    s.defaulted_decisions += u64::from(decision.defaulted);
                }
                let (cnm, origin) = propagate_cnm(&prev.cnm, &decision, chunk, &tally)?;
                AnnotatedChunk {
                    chunk: chunk.clone(),
                    cnm,
                    cnm_origin: origin,
                    decision: Some(decision),
                }
            }
        };
        on_chunk(&annotated);
        out.push(annotated);
    }
    let stats = tally.stats.into_inner();
    Ok((out, stats))
}

pub fn run_chain(
    chunks: &[Chunk],
    gateway: &Gateway,
    extractor: &dyn Extractor,
    anchor_cap: usize,
) -> Result<Vec<AnnotatedChunk>, ContinuityError> {
    run_chain_with(chunks, gateway, extractor, anchor_cap, |_| {}).map(|(v, _)| v)
}

/// One line of the per-run audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub pair: Option<(String, String)>,
    pub chunk_id: String,
    pub value: Option<Verdict>,
    pub raw_response_digest: Option<String>,
    pub cnm_origin: CnmOrigin,
}

impl From<&AnnotatedChunk> for AuditRecord {
    fn from(a: &AnnotatedChunk) -> Self {
        Self {
            pair: a.decision.as_ref().map(|d| d.pair.clone()),
            chunk_id: a.chunk.chunk_id.clone(),
            value: a.decision.as_ref().map(|d| d.value),
            raw_response_digest: a.decision.as_ref().map(|d| prompt_digest(&d.raw_response)),
            cnm_origin: a.cnm_origin,
        }
    }
}

pub fn write_audit_log(out: &mut impl Write, chain: &[AnnotatedChunk]) -> std::io::Result<()> {
    for a in chain {
        serde_json::to_writer(&mut *out, &AuditRecord::from(a))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
