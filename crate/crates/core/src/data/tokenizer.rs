use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

/// Character-level tokenizer with reserved pad and unknown ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct Tokenizer {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for Tokenizer {
    fn from(chars: Vec<char>) -> Self {
        Self::from_chars(chars)
    }
}

impl From<Tokenizer> for Vec<char> {
    fn from(t: Tokenizer) -> Self {
        t.chars
    }
}

impl Tokenizer {
    /// Vocabulary is the sorted set of characters across `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from_chars(set.into_iter().collect())
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + RESERVED)).collect();
        Self { chars, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(UNK_ID))
            .collect()
    }

    /// Pad and unknown ids decode to nothing and `\u{FFFD}` respectively.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                PAD_ID => None,
                UNK_ID => Some('\u{FFFD}'),
                _ => self.chars.get(id - RESERVED).copied(),
            })
            .collect()
    }
}
