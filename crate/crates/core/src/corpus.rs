//! Documents, stitching, and the chunking strategies.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::composer::{cosine, EmbedError, Embedder};
use crate::tokenize::{CharIndex, Tokenizer};

/// Joiner used when stitching manuals into one continuous file.
pub const DEFAULT_JOINER: &str = "\n";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed corpus record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate doc_id `{0}`")]
    DuplicateId(String),
    #[error("nothing to stitch: input sequence is empty")]
    EmptyInput,
    #[error("document `{0}` has no tokens")]
    EmptyDocument(String),
    #[error("invalid chunking parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn intersection_len(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<String>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            source_path: None,
        }
    }
}

/// A positioned segment of a document.
///
/// `token_span` is in tokenizer units, `char_span` in Unicode scalar values
/// of the parent document text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub seq_index: usize,
    pub text: String,
    pub token_span: Span,
    pub char_span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub char_span: Span,
}

fn chunk_id(doc_id: &str, seq_index: usize) -> String {
    format!("{doc_id}#{seq_index}")
}

/// Loads a line-delimited JSON corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&raw)
}

pub fn parse_corpus(raw: &str) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if doc.text.is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: format!("document `{}` has empty text", doc.doc_id),
            });
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Where one input document landed inside a stitched document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchSegment {
    pub doc_id: String,
    pub char_offset: usize,
    pub char_len: usize,
}

/// A stitched document together with the position of every input in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stitched {
    pub document: Document,
    pub segments: Vec<StitchSegment>,
}

impl Stitched {
    /// Translates a span given in the coordinates of an input document into
    /// stitched coordinates. Spans already expressed against the stitched
    /// document pass through unchanged.
    pub fn translate(&self, doc_id: &str, span: Span) -> Option<Span> {
        if doc_id == self.document.doc_id {
            return Some(span);
        }
        let seg = self.segments.iter().find(|s| s.doc_id == doc_id)?;
        if span.end > seg.char_len {
            return None;
        }
        Some(Span::new(
            seg.char_offset + span.start,
            seg.char_offset + span.end,
        ))
    }
}

/// Concatenates documents with `joiner` between consecutive texts.
pub fn stitch_documents(docs: &[Document], joiner: &str) -> Result<Document, CorpusError> {
    stitch_with_map(docs, joiner).map(|s| s.document)
}

pub fn stitch_with_map(docs: &[Document], joiner: &str) -> Result<Stitched, CorpusError> {
    let first = docs.first().ok_or(CorpusError::EmptyInput)?;
    if docs.len() == 1 {
        return Ok(Stitched {
            document: first.clone(),
            segments: vec![StitchSegment {
                doc_id: first.doc_id.clone(),
                char_offset: 0,
                char_len: first.text.chars().count(),
            }],
        });
    }

    let joiner_chars = joiner.chars().count();
    let mut text = String::new();
    let mut segments = Vec::with_capacity(docs.len());
    let mut offset = 0;
    let mut hasher = Sha256::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            text.push_str(joiner);
            offset += joiner_chars;
        }
        let len = doc.text.chars().count();
        segments.push(StitchSegment {
            doc_id: doc.doc_id.clone(),
            char_offset: offset,
            char_len: len,
        });
        text.push_str(&doc.text);
        offset += len;
        hasher.update(doc.doc_id.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hex::encode(hasher.finalize());
    Ok(Stitched {
        document: Document {
            doc_id: format!("stitched-{}", &digest[..16]),
            text,
            source_path: None,
        },
        segments,
    })
}

/// Fixed-size token windows advancing by `size - overlap`.
///
/// Emission stops as soon as a window reaches the end of the document, so a
/// trailing window fully contained in its predecessor is never produced.
pub fn chunk_fixed(
    doc: &Document,
    size: usize,
    overlap: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Chunk>, CorpusError> {
    if size == 0 {
        return Err(CorpusError::InvalidParams("size must be at least 1".into()));
    }
    if overlap >= size {
        return Err(CorpusError::InvalidParams(format!(
            "overlap ({overlap}) must be smaller than size ({size})"
        )));
    }
    let tokens = tokenizer.tokenize(&doc.text);
    let n = tokens.len();
    if n == 0 {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }

    let index = CharIndex::new(&doc.text);
    let stride = size - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        let byte_start = tokens[start].bytes.start;
        let byte_end = tokens[end - 1].bytes.end;
        let seq_index = chunks.len();
        chunks.push(Chunk {
            chunk_id: chunk_id(&doc.doc_id, seq_index),
            doc_id: doc.doc_id.clone(),
            seq_index,
            text: doc.text[byte_start..byte_end].to_string(),
            token_span: Span::new(start, end),
            char_span: Span::new(index.char_of(byte_start), index.char_of(byte_end)),
        });
        if end == n {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits after `.`, `!` or `?` followed by whitespace, and at blank lines.
/// Pieces are trimmed and empty pieces dropped.
pub fn split_sentences(doc: &Document) -> Vec<Sentence> {
    let text = doc.text.as_str();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut cuts = vec![0usize];

    for (k, &(byte, c)) in chars.iter().enumerate() {
        if is_terminal(c) {
            if let Some(&(_, next)) = chars.get(k + 1) {
                if next.is_whitespace() {
                    cuts.push(byte + c.len_utf8());
                }
            }
        } else if c == '\n' {
            // blank line: only non-newline whitespace up to the next '\n'
            let mut j = k + 1;
            while let Some(&(_, w)) = chars.get(j) {
                if w == '\n' {
                    cuts.push(byte);
                    break;
                }
                if !w.is_whitespace() {
                    break;
                }
                j += 1;
            }
        }
    }
    cuts.push(text.len());
    cuts.sort_unstable();
    cuts.dedup();

    let index = CharIndex::new(text);
    let mut sentences = Vec::new();
    for pair in cuts.windows(2) {
        let piece = &text[pair[0]..pair[1]];
        let trimmed = piece.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lead = piece.len() - piece.trim_start().len();
        let start = pair[0] + lead;
        let end = start + trimmed.len();
        sentences.push(Sentence {
            text: trimmed.to_string(),
            char_span: Span::new(index.char_of(start), index.char_of(end)),
        });
    }
    sentences
}

/// Sentence-level topic-shift chunking.
///
/// Consecutive sentences stay together while their embedding cosine is at
/// least `threshold`. Chunk text is the chunk's sentences joined by a single
/// space; `char_span` runs from the first sentence start to the last
/// sentence end.
pub fn chunk_cosine(
    doc: &Document,
    threshold: f64,
    embedder: &dyn Embedder,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Chunk>, CorpusError> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(CorpusError::InvalidParams(format!(
            "cosine threshold {threshold} outside [-1, 1]"
        )));
    }
    let sentences = split_sentences(doc);
    if sentences.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    let vectors = embedder.embed_batch(&texts)?;

    let mut groups: Vec<Vec<usize>> = vec![vec![0]];
    for j in 0..sentences.len() - 1 {
        if cosine(&vectors[j], &vectors[j + 1]) >= threshold {
            groups.last_mut().expect("non-empty").push(j + 1);
        } else {
            groups.push(vec![j + 1]);
        }
    }

    let index = CharIndex::new(&doc.text);
    let tokens = tokenizer.tokenize(&doc.text);
    let mut chunks = Vec::with_capacity(groups.len());
    for (seq_index, group) in groups.iter().enumerate() {
        let first = &sentences[group[0]];
        let last = &sentences[*group.last().expect("non-empty")];
        let char_span = Span::new(first.char_span.start, last.char_span.end);
        let byte_start = index.byte_of(char_span.start);
        let byte_end = index.byte_of(char_span.end);
        let tok_start = tokens.partition_point(|t| t.bytes.end <= byte_start);
        let tok_end = tokens.partition_point(|t| t.bytes.start < byte_end);
        let text = group
            .iter()
            .map(|&j| sentences[j].text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        chunks.push(Chunk {
            chunk_id: chunk_id(&doc.doc_id, seq_index),
            doc_id: doc.doc_id.clone(),
            seq_index,
            text,
            token_span: Span::new(tok_start, tok_end.max(tok_start + 1)),
            char_span,
        });
    }
    Ok(chunks)
}
