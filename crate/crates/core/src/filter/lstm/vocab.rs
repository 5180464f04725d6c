use std::collections::HashMap;

use crate::text::tokenize;
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const OOV: u32 = 1;
pub const DEFAULT_VOCAB_SIZE: usize = 10_000;

/// Case-folded token ids. Id 0 is padding, id 1 is out-of-vocabulary; the
/// remaining ids are assigned by descending training frequency, ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size < 3 {
            return Err(Error::invalid("vocabulary size must be at least 3"));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::invalid("empty vocabulary: training text has no tokens"));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 2);
        Self::from_tokens(
            ["<pad>".to_string(), "<unk>".to_string()]
                .into_iter()
                .chain(ranked.into_iter().map(|(t, _)| t))
                .collect(),
        )
    }

    /// Rebuilds from tokens in id order (including the two reserved entries).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::invalid("vocabulary needs the two reserved ids and at least one token"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate().skip(2) {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    /// Token ids truncated to `max_len`, without padding.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect()
    }

    /// Token ids truncated or trailing-padded to exactly `max_len`.
    pub fn encode_padded(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids = self.encode(text, max_len);
        ids.resize(max_len, PAD);
        ids
    }
}
