//! Category / Nouns / Model signatures extracted per chunk.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::corpus::Chunk;
use crate::llm_gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{truncate_chars, CNM_EXTRACT};

/// Characters of chunk text placed into the extraction prompt.
pub const CNM_INPUT_CHARS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CnmError {
    #[error("no JSON object in response")]
    NoJson,
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("field `{field}` has the wrong type")]
    FieldType { field: &'static str },
    #[error("expected 1 or 2 nouns, got {0}")]
    NounCount(usize),
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("first noun `{noun}` is not a compound of category `{category}`")]
    CompoundNoun { category: String, noun: String },
}

/// A chunk signature. Category and model are `None` when absent or ambiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnm {
    pub category: Option<String>,
    pub nouns: Vec<String>,
    pub model: Option<String>,
    pub confidence: f64,
}

impl Cnm {
    /// Signature with every field empty; used for content-free chunks.
    pub fn null() -> Self {
        Self {
            category: None,
            nouns: Vec::new(),
            model: None,
            confidence: 0.0,
        }
    }

    pub fn is_null(&self) -> bool {
        self.category.is_none() && self.nouns.is_empty() && self.model.is_none()
    }

    /// Checks the signature invariants. The null signature is the only one
    /// allowed to carry no nouns.
    pub fn validate(&self) -> Result<(), CnmError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(CnmError::Confidence(self.confidence));
        }
        if self.is_null() {
            return Ok(());
        }
        if self.nouns.is_empty() || self.nouns.len() > 2 {
            return Err(CnmError::NounCount(self.nouns.len()));
        }
        if let Some(category) = &self.category {
            let first = &self.nouns[0];
            if !first.starts_with(&format!("{category} ")) {
                return Err(CnmError::CompoundNoun {
                    category: category.clone(),
                    noun: first.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn build_cnm_prompt(chunk_text: &str) -> String {
    CNM_EXTRACT.fill(&[("text", truncate_chars(chunk_text, CNM_INPUT_CHARS))])
}

/// Slices out the outermost `{ ... }` so code fences and chatter around the
/// object are ignored.
pub(crate) fn json_object_slice(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end > start).then(|| &raw[start..=end])
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_null_like(s: &str) -> bool {
    matches!(
        s.to_ascii_lowercase().as_str(),
        "" | "null" | "none" | "n/a" | "na" | "unknown"
    )
}

fn label(value: Option<&Value>, field: &'static str, lowercase: bool) -> Result<Option<String>, CnmError> {
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => {
            let s = normalize_ws(s);
            if is_null_like(&s) {
                Ok(None)
            } else if lowercase {
                Ok(Some(s.to_lowercase()))
            } else {
                Ok(Some(s))
            }
        }
        Some(_) => Err(CnmError::FieldType { field }),
    }
}

/// Parses a model reply into a validated signature.
///
/// Category and nouns are lower-cased; the model label keeps its case since
/// identifiers such as `225B` are case-bearing. A first noun that does not
/// begin with the category is repaired by prefixing the category.
pub fn parse_cnm_response(raw: &str) -> Result<Cnm, CnmError> {
    let slice = json_object_slice(raw).ok_or(CnmError::NoJson)?;
    let value: Value = serde_json::from_str(slice).map_err(|e| CnmError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or(CnmError::NoJson)?;

    let category = label(obj.get("category"), "category", true)?;
    let model = label(obj.get("model"), "model", false)?;

    let nouns: Vec<String> = match obj.get("nouns") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::String(s)) => vec![s.clone()],
        Some(Value::Array(items)) => {
            let mut out = Vec::new();
            for item in items {
                match item {
                    Value::String(s) => out.push(s.clone()),
                    Value::Null => {}
                    _ => return Err(CnmError::FieldType { field: "nouns" }),
                }
            }
            out
        }
        Some(_) => return Err(CnmError::FieldType { field: "nouns" }),
    }
    .into_iter()
    .map(|n| normalize_ws(&n).to_lowercase())
    .filter(|n| !is_null_like(n))
    .collect();

    let confidence = match obj.get("confidence") {
        None | Some(Value::Null) => 0.0,
        Some(Value::Number(n)) => n.as_f64().ok_or(CnmError::FieldType { field: "confidence" })?,
        Some(Value::String(s)) => s
            .trim()
            .parse::<f64>()
            .map_err(|_| CnmError::FieldType { field: "confidence" })?,
        Some(_) => return Err(CnmError::FieldType { field: "confidence" }),
    };

    if nouns.is_empty() || nouns.len() > 2 {
        return Err(CnmError::NounCount(nouns.len()));
    }

    let mut cnm = Cnm {
        category,
        nouns,
        model,
        confidence,
    };
    match cnm.validate() {
        Ok(()) => Ok(cnm),
        Err(CnmError::CompoundNoun { category, noun }) => {
            debug!(%category, %noun, "repairing compound noun");
            cnm.nouns[0] = format!("{category} {noun}");
            cnm.validate()?;
            Ok(cnm)
        }
        Err(e) => Err(e),
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "if", "in", "is", "it", "its",
    "of", "on", "or", "that", "the", "this", "to", "was", "were", "with", "you", "your",
];

fn first_content_word(text: &str) -> Option<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .find(|w| !STOPWORDS.contains(&w.as_str()))
}

/// Signature used when the model never produced a usable reply.
pub fn fallback_cnm(chunk_text: &str) -> Cnm {
    match first_content_word(chunk_text) {
        Some(word) => Cnm {
            category: None,
            nouns: vec![word],
            model: None,
            confidence: 0.0,
        },
        None => Cnm::null(),
    }
}

fn corrective_prompt(prompt: &str, err: &CnmError) -> String {
    format!(
        "{prompt}\n\nYour previous reply was rejected ({err}). Reply again with one JSON object \
         with keys category, nouns, model, confidence. Return JSON ONLY."
    )
}

/// Result of one extraction, with bookkeeping for run manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub cnm: Cnm,
    pub calls: u32,
    pub fell_back: bool,
}

/// Extracts a signature with at most two gateway calls: the prompt, then
/// one corrective re-prompt. A second failure yields [`fallback_cnm`].
pub fn extract_cnm(chunk: &Chunk, gateway: &Gateway) -> Result<Extraction, GatewayError> {
    let prompt = build_cnm_prompt(&chunk.text);
    let first = gateway.complete(&ChatRequest::new(prompt.as_str()))?;
    let err = match parse_cnm_response(&first.text) {
        Ok(cnm) => {
            return Ok(Extraction {
                cnm,
                calls: 1,
                fell_back: false,
            })
        }
        Err(e) => e,
    };

    let retry = gateway.complete(&ChatRequest::new(corrective_prompt(&prompt, &err)))?;
    match parse_cnm_response(&retry.text) {
        Ok(cnm) => Ok(Extraction {
            cnm,
            calls: 2,
            fell_back: false,
        }),
        Err(e) => {
            warn!(chunk = %chunk.chunk_id, error = %e, "CNM extraction failed twice, using fallback");
            Ok(Extraction {
                cnm: fallback_cnm(&chunk.text),
                calls: 2,
                fell_back: true,
            })
        }
    }
}

/// Anything that can produce a signature for a chunk.
pub trait Extractor {
    fn extract(&self, chunk: &Chunk) -> Result<Extraction, GatewayError>;
}

/// The gateway-backed extractor.
#[derive(Debug, Clone)]
pub struct CnmExtractor {
    gateway: Gateway,
}

impl CnmExtractor {
    pub fn new(gateway: Gateway) -> Self {
        Self { gateway }
    }
}

impl Extractor for CnmExtractor {
    fn extract(&self, chunk: &Chunk) -> Result<Extraction, GatewayError> {
        extract_cnm(chunk, &self.gateway)
    }
}
