//! Syllable-level tokenizer and vocabulary.
//!
//! Text is split on whitespace, then after every tsek (U+0F0B) so that each
//! Tibetan syllable keeps its trailing delimiter. Other scripts are split on
//! whitespace only.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{invalid, Error, Result};

pub const TSEK: char = '\u{0F0B}';

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
pub const SEP_ID: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, MASK, CLS, SEP];
pub const NUM_SPECIAL_TOKENS: usize = SPECIAL_TOKENS.len();

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if c == TSEK {
                let end = i + c.len_utf8();
                out.push(chunk[start..end].to_string());
                start = end;
            }
        }
        if start < chunk.len() {
            out.push(chunk[start..].to_string());
        }
    }
    out
}

/// NFC-normalises, drops control characters, and collapses whitespace runs
/// to single spaces with no leading or trailing whitespace.
pub fn preprocess_symbols(text: &str) -> String {
    let normalized: String = text.nfc().collect();
    let mut out = String::with_capacity(normalized.len());
    let mut pending_space = false;
    for c in normalized.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_control() {
            continue;
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the special tokens.
    pub fn new() -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Builds from texts, most frequent token first (ties broken by token
    /// string so the result is deterministic).
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::new();
        for (tok, _) in ranked {
            vocab.push(tok);
        }
        vocab
    }

    fn push(&mut self, tok: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(tok.clone(), id);
        self.tokens.push(tok);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL_TOKENS
    }

    /// Appends new tokens with consecutive ids starting at the current size.
    /// Nothing is added if any token is empty, duplicated, or already known.
    pub fn add_tokens<S: AsRef<str>>(&mut self, new: &[S]) -> Result<Vec<u32>> {
        let mut seen = std::collections::HashSet::new();
        for tok in new {
            let tok = tok.as_ref();
            if tok.is_empty() {
                return Err(invalid("cannot add an empty token"));
            }
            if self.contains(tok) || !seen.insert(tok) {
                return Err(Error::DuplicateToken(tok.to_string()));
            }
        }
        Ok(new.iter().map(|t| self.push(t.as_ref().to_string())).collect())
    }

    /// One non-special token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens[NUM_SPECIAL_TOKENS..] {
            body.push_str(tok);
            body.push('\n');
        }
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut vocab = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            if vocab.contains(line) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate token `{line}`"),
                });
            }
            vocab.push(line.to_string());
        }
        Ok(vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Tokenizer {
    vocab: Vocabulary,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_mut(&mut self) -> &mut Vocabulary {
        &mut self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text)
    }

    /// Token ids; unknown tokens map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|t| self.vocab.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Like [`encode`](Self::encode) but fails on unknown tokens.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<u32>> {
        tokenize(text)
            .iter()
            .map(|t| {
                self.vocab
                    .id(t)
                    .ok_or_else(|| invalid(format!("token `{t}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Joins tokens back into text: no space after a tsek-terminated
    /// syllable, one space otherwise.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(Error::OutOfRange {
                what: "vocabulary",
                index: id as usize,
                size: self.vocab.len(),
            })?;
            if !out.is_empty() && !out.ends_with(TSEK) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        Ok(out)
    }
}
