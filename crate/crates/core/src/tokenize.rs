//! Tokenizers used for fixed-size chunking.
//!
//! Token boundaries are reported as byte ranges into the source text so that
//! chunk text can be sliced out verbatim, whitespace included.

use std::fmt;
use std::ops::Range;

/// A token located in its source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// Byte range of the token in the source text.
    pub bytes: Range<usize>,
}

/// Splits text into positioned tokens.
///
/// Implementations must be deterministic and return tokens in ascending,
/// non-overlapping byte order.
pub trait Tokenizer: Send + Sync + fmt::Debug {
    fn tokenize(&self, text: &str) -> Vec<Token>;

    /// Short identifier recorded in run manifests.
    fn name(&self) -> &str;
}

/// Whitespace-plus-punctuation tokenizer.
///
/// A token is either a maximal run of alphanumeric characters (including
/// `_`) or a single character that is neither alphanumeric nor whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleTokenizer;

impl Tokenizer for SimpleTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        let mut word_start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_alphanumeric() || c == '_' {
                if word_start.is_none() {
                    word_start = Some(i);
                }
                continue;
            }
            if let Some(start) = word_start.take() {
                tokens.push(Token { bytes: start..i });
            }
            if !c.is_whitespace() {
                tokens.push(Token {
                    bytes: i..i + c.len_utf8(),
                });
            }
        }
        if let Some(start) = word_start {
            tokens.push(Token {
                bytes: start..text.len(),
            });
        }
        tokens
    }

    fn name(&self) -> &str {
        "simple-ws-punct/v1"
    }
}

/// Whitespace-only tokenizer, closer to a "word count" notion of tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        let mut start: Option<usize> = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(s) = start.take() {
                    tokens.push(Token { bytes: s..i });
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            tokens.push(Token { bytes: s..text.len() });
        }
        tokens
    }

    fn name(&self) -> &str {
        "whitespace/v1"
    }
}

/// Maps byte offsets of a string to character offsets.
#[derive(Debug, Clone)]
pub struct CharIndex {
    // byte offset of every char boundary, plus text.len() at the end
    boundaries: Vec<usize>,
}

impl CharIndex {
    pub fn new(text: &str) -> Self {
        let mut boundaries: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
        boundaries.push(text.len());
        Self { boundaries }
    }

    /// Character offset of a byte offset that lies on a char boundary.
    pub fn char_of(&self, byte: usize) -> usize {
        match self.boundaries.binary_search(&byte) {
            Ok(i) => i,
            Err(i) => i,
        }
    }

    /// Byte offset of a character offset, clamped to the end of the text.
    pub fn byte_of(&self, ch: usize) -> usize {
        let last = self.boundaries.len() - 1;
        self.boundaries[ch.min(last)]
    }

    pub fn char_len(&self) -> usize {
        self.boundaries.len() - 1
    }
}
