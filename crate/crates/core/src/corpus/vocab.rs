use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Sentence;
use crate::error::{Error, Result};

/// Reserved index for padding.
pub const PAD_INDEX: usize = 0;
/// Reserved index for out-of-vocabulary tokens.
pub const UNK_INDEX: usize = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token-to-index map with reserved padding and unknown slots.
///
/// Indices are dense and 0-based; ordering is frequency-descending then
/// lexicographic, so rebuilding from the same corpus is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    min_count: usize,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>, min_count: usize) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary {
            words,
            min_count,
            index,
        }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Index for a token; unknown tokens map to [`UNK_INDEX`].
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn indices(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }
}

/// Count token frequencies and keep tokens seen at least `min_count` times.
/// `extra_tokens` (e.g. slot-description words) are counted once each.
pub fn build_vocab(
    data: &[Sentence],
    extra_tokens: &[String],
    min_count: usize,
) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::Vocab("min_count must be >= 1".into()));
    }
    if data.is_empty() && extra_tokens.is_empty() {
        return Err(Error::Vocab("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in data {
        for token in &sentence.tokens {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    for token in extra_tokens {
        *counts.entry(token).or_insert(0) += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    // frequency descending, then lexicographic
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut words = Vec::with_capacity(kept.len() + 2);
    words.push(PAD_TOKEN.to_string());
    words.push(UNK_TOKEN.to_string());
    words.extend(kept.into_iter().map(|(w, _)| w.to_string()));
    Ok(Vocabulary::from_words(words, min_count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TagLabel;

    fn sentence(tokens: &[&str]) -> Sentence {
        Sentence::new(
            tokens.iter().map(|t| t.to_string()).collect(),
            vec![TagLabel::Outside; tokens.len()],
            "d",
        )
        .unwrap()
    }

    #[test]
    fn min_count_filters_to_unknown() {
        let vocab = build_vocab(&[sentence(&["a", "a", "b"])], &[], 2).unwrap();
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        assert_eq!(vocab.lookup("b"), UNK_INDEX);
        assert_ne!(vocab.lookup("a"), UNK_INDEX);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let vocab = build_vocab(&[sentence(&["a", "b", "c"])], &[], 1).unwrap();
        for t in ["a", "b", "c"] {
            assert!(vocab.contains(t));
        }
        assert_eq!(vocab.len(), 5); // pad + unk + 3
    }

    #[test]
    fn reload_is_identical() {
        let vocab = build_vocab(&[sentence(&["b", "a", "a", "c"])], &[], 1).unwrap();
        let json = serde_json::to_string(&vocab).unwrap();
        let mut reloaded: Vocabulary = serde_json::from_str(&json).unwrap();
        reloaded.rebuild_index();
        assert_eq!(reloaded, vocab);
        for t in ["a", "b", "c", "zzz"] {
            assert_eq!(reloaded.lookup(t), vocab.lookup(t));
        }
    }

    #[test]
    fn deterministic_ordering() {
        // same frequency sorts lexicographically
        let vocab = build_vocab(&[sentence(&["b", "a", "c", "a"])], &[], 1).unwrap();
        assert_eq!(vocab.words()[2], "a"); // freq 2 first
        assert_eq!(vocab.words()[3], "b");
        assert_eq!(vocab.words()[4], "c");
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(build_vocab(&[], &[], 1).is_err());
    }
}
