//! Whitespace word tokenizer over a closed vocabulary.
//!
//! Ids are dense and stable: the five reserved tokens come first, then the
//! supplied words sorted and deduplicated, so the same word list always
//! yields the same id assignment.

use crate::error::{Error, Result};
use std::collections::BTreeMap;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Answer-start sentinel separating the request from the response.
pub const ANS: TokenId = 4;

pub const RESERVED_WORDS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<ans>"];

#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, TokenId>,
}

impl Tokenizer {
    pub fn new(vocabulary: impl IntoIterator<Item = String>) -> Self {
        let mut words: Vec<String> = RESERVED_WORDS.iter().map(|s| s.to_string()).collect();
        let mut extra: Vec<String> = vocabulary
            .into_iter()
            .filter(|w| !w.is_empty() && !RESERVED_WORDS.contains(&w.as_str()))
            .collect();
        extra.sort();
        extra.dedup();
        words.extend(extra);
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::UnknownTokenId(id))
    }

    /// Splits on whitespace; unknown words map to the `<unk>` id. Empty
    /// text yields an empty sequence.
    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of `tokenize` for in-vocabulary text: words joined by single
    /// spaces. Fails on out-of-range ids.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.word(id)).collect();
        Ok(words?.join(" "))
    }
}
