//! Labeled corpora, the IOB tag algebra, and domain knowledge files.
//!
//! Everything here is immutable after construction; the loaders are pure
//! functions of file bytes.

mod io;
mod knowledge;
mod sample;
mod vocab;

pub use io::{load_corpus, parse_corpus, write_corpus, CtxVectors, WordEmbeddings};
pub use knowledge::{DomainKnowledge, Exemplar, SlotKnowledge};
pub use sample::{split_train_valid, subsample};
pub use vocab::{build_vocab, Vocabulary, PAD_INDEX, UNK_INDEX};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One IOB-decorated output symbol: `O`, `B-<slot>`, or `I-<slot>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TagLabel {
    Outside,
    Begin(String),
    Inside(String),
}

impl TagLabel {
    /// Parse the string form; the slot name may itself contain dashes
    /// (`B-deny-to_city` has slot `deny-to_city`).
    pub fn parse(s: &str) -> Result<TagLabel> {
        if s == "O" {
            return Ok(TagLabel::Outside);
        }
        let (prefix, slot) = match s.split_once('-') {
            Some(parts) => parts,
            None => return Err(Error::Tag(s.to_string())),
        };
        if slot.is_empty() {
            return Err(Error::Tag(s.to_string()));
        }
        match prefix {
            "B" => Ok(TagLabel::Begin(slot.to_string())),
            "I" => Ok(TagLabel::Inside(slot.to_string())),
            _ => Err(Error::Tag(s.to_string())),
        }
    }

    pub fn slot(&self) -> Option<&str> {
        match self {
            TagLabel::Outside => None,
            TagLabel::Begin(s) | TagLabel::Inside(s) => Some(s),
        }
    }

    pub fn is_outside(&self) -> bool {
        matches!(self, TagLabel::Outside)
    }

    pub fn iob(&self) -> Iob {
        match self {
            TagLabel::Outside => Iob::O,
            TagLabel::Begin(_) => Iob::B,
            TagLabel::Inside(_) => Iob::I,
        }
    }
}

impl std::fmt::Display for TagLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TagLabel::Outside => write!(f, "O"),
            TagLabel::Begin(s) => write!(f, "B-{s}"),
            TagLabel::Inside(s) => write!(f, "I-{s}"),
        }
    }
}

/// The three IOB symbols, in the fixed embedding order (B, I, O).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Iob {
    B = 0,
    I = 1,
    O = 2,
}

/// One annotated sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<TagLabel>,
    pub domain: String,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, tags: Vec<TagLabel>, domain: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        if tokens.len() != tags.len() {
            return Err(Error::Invalid(format!(
                "sentence has {} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::Invalid(format!("invalid token {t:?}")));
        }
        Ok(Sentence {
            tokens,
            tags,
            domain: domain.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A maximal labeled span; positions are 1-based inclusive token indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Chunk {
    pub slot: String,
    pub start: usize,
    pub end: usize,
}

/// Extract chunks following the CoNLL evaluation convention: `B-x` always
/// starts a chunk, `I-x` continues a chunk of `x` or leniently starts one
/// when the previous tag was `O` or a different slot, and `O` ends any
/// open chunk.
pub fn extract_chunks(tags: &[TagLabel]) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let pos = i + 1;
        match tag {
            TagLabel::Outside => {
                if let Some((slot, start)) = open.take() {
                    chunks.push(Chunk { slot, start, end: pos - 1 });
                }
            }
            TagLabel::Begin(slot) => {
                if let Some((s, start)) = open.take() {
                    chunks.push(Chunk { slot: s, start, end: pos - 1 });
                }
                open = Some((slot.clone(), pos));
            }
            TagLabel::Inside(slot) => match &open {
                Some((s, _)) if s == slot => {}
                _ => {
                    if let Some((s, start)) = open.take() {
                        chunks.push(Chunk { slot: s, start, end: pos - 1 });
                    }
                    open = Some((slot.clone(), pos));
                }
            },
        }
    }
    if let Some((slot, start)) = open {
        chunks.push(Chunk { slot, start, end: tags.len() });
    }
    chunks
}

/// Render a non-overlapping chunk set back into an IOB tag sequence.
pub fn render_chunks(chunks: &[Chunk], len: usize) -> Vec<TagLabel> {
    let mut tags = vec![TagLabel::Outside; len];
    for ch in chunks {
        tags[ch.start - 1] = TagLabel::Begin(ch.slot.clone());
        for i in ch.start..ch.end {
            tags[i] = TagLabel::Inside(ch.slot.clone());
        }
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(spec: &[&str]) -> Vec<TagLabel> {
        spec.iter().map(|s| TagLabel::parse(s).unwrap()).collect()
    }

    #[test]
    fn parse_tag_grammar() {
        assert_eq!(
            TagLabel::parse("B-from_city").unwrap(),
            TagLabel::Begin("from_city".into())
        );
        assert_eq!(TagLabel::parse("O").unwrap(), TagLabel::Outside);
        assert_eq!(
            TagLabel::parse("I-arrive_airport").unwrap(),
            TagLabel::Inside("arrive_airport".into())
        );
        assert_eq!(
            TagLabel::parse("B-deny-to_city").unwrap(),
            TagLabel::Begin("deny-to_city".into())
        );
        assert_eq!(TagLabel::parse("O").unwrap().slot(), None);
    }

    #[test]
    fn parse_tag_rejects_malformed() {
        for bad in ["B-", "X-city", "B", "I", ""] {
            let err = TagLabel::parse(bad).unwrap_err();
            assert!(err.to_string().contains(bad), "error should name {bad:?}");
        }
    }

    #[test]
    fn chunks_basic() {
        let got = extract_chunks(&tags(&["O", "B-from_city", "I-from_city", "O", "B-date"]));
        assert_eq!(
            got,
            vec![
                Chunk { slot: "from_city".into(), start: 2, end: 3 },
                Chunk { slot: "date".into(), start: 5, end: 5 },
            ]
        );
    }

    #[test]
    fn chunks_lenient_inside_start() {
        let got = extract_chunks(&tags(&["I-city", "I-city"]));
        assert_eq!(got, vec![Chunk { slot: "city".into(), start: 1, end: 2 }]);
    }

    #[test]
    fn chunks_repeated_begin() {
        let got = extract_chunks(&tags(&["B-a", "B-a"]));
        assert_eq!(
            got,
            vec![
                Chunk { slot: "a".into(), start: 1, end: 1 },
                Chunk { slot: "a".into(), start: 2, end: 2 },
            ]
        );
    }

    #[test]
    fn chunks_slot_switch_inside() {
        let got = extract_chunks(&tags(&["I-a", "I-b", "B-b"]));
        assert_eq!(
            got,
            vec![
                Chunk { slot: "a".into(), start: 1, end: 1 },
                Chunk { slot: "b".into(), start: 2, end: 2 },
                Chunk { slot: "b".into(), start: 3, end: 3 },
            ]
        );
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_tag() -> impl Strategy<Value = TagLabel> {
        prop_oneof![
            Just(TagLabel::Outside),
            "[a-z][a-z_]{0,8}".prop_map(TagLabel::Begin),
            "[a-z][a-z_]{0,8}".prop_map(TagLabel::Inside),
        ]
    }

    proptest! {
        #[test]
        fn parse_render_identity(tag in arb_tag()) {
            let rendered = tag.to_string();
            prop_assert_eq!(TagLabel::parse(&rendered).unwrap(), tag);
        }

        #[test]
        fn chunk_render_round_trip(
            slots in proptest::collection::vec(("[a-z]{1,4}", 1usize..3), 0..4),
        ) {
            // lay out non-overlapping chunks with a one-token gap between them
            let mut chunks = Vec::new();
            let mut pos = 1usize;
            for (slot, width) in slots {
                chunks.push(Chunk { slot, start: pos, end: pos + width - 1 });
                pos += width + 1;
            }
            let len = pos.max(2) - 1;
            let tags = render_chunks(&chunks, len);
            prop_assert_eq!(extract_chunks(&tags), chunks);
        }
    }
}
