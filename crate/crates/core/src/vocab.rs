//! Whitespace tokenization and the frequency-ranked vocabulary.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const BOB: usize = 4;
pub const EOB: usize = 5;
pub const MASK: usize = 6;

/// Reserved tokens, pinned to ids 0..6 in this order.
pub const RESERVED: [&str; 7] = ["<pad>", "<unk>", "<bos>", "<eos>", "<bob>", "<eob>", "<mask>"];

/// Blank placeholder as written in template text.
pub const BLANK_MARKER: &str = "__m__";

pub fn tokenize(line: &str, lowercase: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids }
    }

    /// Keeps the most frequent tokens (ties broken lexicographically) with
    /// count ≥ `min_freq`, up to `max_size` entries including the reserved ones.
    pub fn build<I, S>(corpus: I, max_size: usize, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let sentences: Vec<S> = corpus.into_iter().collect();
        let mut seen_any = false;
        for s in &sentences {
            for t in s.as_ref() {
                seen_any = true;
                if RESERVED.contains(&t.as_str()) || t == BLANK_MARKER {
                    continue;
                }
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let capacity = max_size.saturating_sub(RESERVED.len());
        let mut vocab = Self::reserved_only();
        for (tok, _) in ranked.into_iter().take(capacity) {
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: &str) {
        self.ids.insert(tok.to_string(), self.tokens.len());
        self.tokens.push(tok.to_string());
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if token == BLANK_MARKER {
            return MASK;
        }
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// One token per line; line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(Error::Format(format!(
                "vocab file has {} lines, fewer than the {} reserved tokens",
                lines.len(),
                RESERVED.len()
            )));
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if lines[i] != *r {
                return Err(Error::Format(format!("vocab line {i} must be '{r}', found '{}'", lines[i])));
            }
        }
        let mut vocab = Self::reserved_only();
        for (i, tok) in lines.iter().enumerate().skip(RESERVED.len()) {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(Error::Format(format!("vocab line {i} is not a single token: '{tok}'")));
            }
            if vocab.ids.contains_key(*tok) || *tok == BLANK_MARKER {
                return Err(Error::Format(format!("vocab line {i}: duplicate or reserved token '{tok}'")));
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    /// SHA-256 of the vocab file content, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}
