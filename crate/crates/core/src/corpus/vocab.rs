use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// Word ↔ id mapping. Ids 0 and 1 are reserved for padding and unknown words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(Vec::new())
    }
}

impl Vocab {
    /// Vocabulary with the reserved ids followed by `words` in order.
    pub fn from_words(words: Vec<String>) -> Self {
        let mut all = vec!["[PAD]".to_string(), "[UNK]".to_string()];
        all.extend(words);
        let index = all
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words: all, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn get(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Words in id order, excluding the two reserved entries.
    pub fn words(&self) -> &[String] {
        &self.words[2..]
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize_words(title: &str) -> Vec<String> {
    title
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token ids for a title, truncated (prefix kept) or padded to `title_len`.
pub fn tokenize_title(title: &str, vocab: &Vocab, title_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = tokenize_words(title)
        .iter()
        .take(title_len)
        .map(|w| vocab.id(w))
        .collect();
    ids.resize(title_len, PAD);
    ids
}

/// Builds a vocabulary from titles. Words seen fewer than `min_count` times
/// are dropped; the rest get ids by descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<'t>(titles: impl IntoIterator<Item = &'t str>, min_count: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for title in titles {
        for w in tokenize_words(title) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then_with(|| wa.cmp(wb)));
    Vocab::from_words(kept.into_iter().map(|(w, _)| w).collect())
}
