use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::{Sentence, TagLabel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Load a `token<TAB>tag` corpus; blank lines separate sentences.
pub fn load_corpus(path: impl AsRef<Path>, domain: &str) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_corpus(&text, domain, &path.display().to_string())
}

/// Parse corpus text; `source` is used for error locations.
pub fn parse_corpus(text: &str, domain: &str, source: &str) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<TagLabel> = Vec::new();

    let corpus_err = |line: usize, msg: String| Error::Corpus {
        path: source.to_string(),
        line,
        msg,
    };

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<TagLabel>, line: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let sentence = Sentence::new(std::mem::take(tokens), std::mem::take(tags), domain)
            .map_err(|e| corpus_err(line, e.to_string()))?;
        sentences.push(sentence);
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            flush(&mut tokens, &mut tags, line_no)?;
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| corpus_err(line_no, format!("expected `token<TAB>tag`, got {line:?}")))?;
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(corpus_err(line_no, format!("invalid token {token:?}")));
        }
        let tag = TagLabel::parse(tag).map_err(|e| corpus_err(line_no, e.to_string()))?;
        tokens.push(token.to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, text.lines().count())?;
    Ok(sentences)
}

/// Write sentences in the corpus file format (used for predictions).
pub fn write_corpus(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        for (token, tag) in s.tokens.iter().zip(&s.tags) {
            writeln!(out, "{token}\t{tag}")?;
        }
    }
    Ok(())
}

/// Word embeddings in the text format `<count> <dim>` header plus one
/// `<word> <v1> ... <vdim>` line per word.
#[derive(Clone, Debug)]
pub struct WordEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl WordEmbeddings {
    pub fn new(dim: usize) -> Self {
        WordEmbeddings {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) {
        assert_eq!(vector.len(), self.dim, "embedding dim mismatch");
        self.vectors.insert(word.into(), vector);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<WordEmbeddings> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<WordEmbeddings> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Embedding(format!("{source}: empty file")))?;
        let mut parts = header.split_whitespace();
        let count: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Embedding(format!("{source}: bad header {header:?}")))?;
        let dim: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Embedding(format!("{source}: bad header {header:?}")))?;

        let mut emb = WordEmbeddings::new(dim);
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let line_no = idx + 2;
            let mut parts = line.split_whitespace();
            let word = parts
                .next()
                .ok_or_else(|| Error::Embedding(format!("{source}:{line_no}: missing word")))?;
            let vector: std::result::Result<Vec<f64>, _> =
                parts.map(|v| v.parse::<f64>()).collect();
            let vector = vector
                .map_err(|e| Error::Embedding(format!("{source}:{line_no}: {e}")))?;
            if vector.len() != dim {
                return Err(Error::Embedding(format!(
                    "{source}:{line_no}: expected {dim} values, got {}",
                    vector.len()
                )));
            }
            emb.vectors.insert(word.to_string(), vector);
        }
        if emb.vectors.len() != count {
            return Err(Error::Embedding(format!(
                "{source}: header declares {count} words, found {}",
                emb.vectors.len()
            )));
        }
        Ok(emb)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = fs::File::create(path)?;
        writeln!(out, "{} {}", self.vectors.len(), self.dim)?;
        for (word, vec) in &self.vectors {
            write!(out, "{word}")?;
            for v in vec {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CtxRecord {
    domain: String,
    slot: String,
    exemplar_index: usize,
    forward: Vec<Vec<f64>>,
    backward: Vec<Vec<f64>>,
}

/// Precomputed per-token contextual vectors for slot exemplars
/// (JSON lines, one record per exemplar).
#[derive(Clone, Debug, Default)]
pub struct CtxVectors {
    entries: BTreeMap<(String, String, usize), (Tensor, Tensor)>,
}

impl CtxVectors {
    pub fn load(path: impl AsRef<Path>) -> Result<CtxVectors> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<CtxVectors> {
        let mut out = CtxVectors::default();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: CtxRecord = serde_json::from_str(line).map_err(|e| {
                Error::CtxVectors(format!("{source}:{}: {e}", idx + 1))
            })?;
            let to_tensor = |rows: Vec<Vec<f64>>, name: &str| -> Result<Tensor> {
                if rows.is_empty() || rows[0].is_empty() {
                    return Err(Error::CtxVectors(format!(
                        "{source}:{}: empty {name} vectors",
                        idx + 1
                    )));
                }
                let dim = rows[0].len();
                if rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::CtxVectors(format!(
                        "{source}:{}: ragged {name} vectors",
                        idx + 1
                    )));
                }
                Ok(Tensor::from_rows(&rows))
            };
            let fwd = to_tensor(rec.forward, "forward")?;
            let bwd = to_tensor(rec.backward, "backward")?;
            if fwd.rows() != bwd.rows() {
                return Err(Error::CtxVectors(format!(
                    "{source}:{}: forward has {} rows, backward {}",
                    idx + 1,
                    fwd.rows(),
                    bwd.rows()
                )));
            }
            out.entries
                .insert((rec.domain, rec.slot, rec.exemplar_index), (fwd, bwd));
        }
        Ok(out)
    }

    pub fn get(&self, domain: &str, slot: &str, exemplar_index: usize) -> Option<(&Tensor, &Tensor)> {
        self.entries
            .get(&(domain.to_string(), slot.to_string(), exemplar_index))
            .map(|(f, b)| (f, b))
    }

    pub fn insert(&mut self, domain: &str, slot: &str, exemplar_index: usize, fwd: Tensor, bwd: Tensor) {
        self.entries
            .insert((domain.to_string(), slot.to_string(), exemplar_index), (fwd, bwd));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for ((domain, slot, exemplar_index), (fwd, bwd)) in &self.entries {
            let row_of = |t: &Tensor| -> Vec<Vec<f64>> {
                (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
            };
            let value = serde_json::json!({
                "domain": domain,
                "slot": slot,
                "exemplar_index": exemplar_index,
                "forward": row_of(fwd),
                "backward": row_of(bwd),
            });
            writeln!(out, "{value}")?;
        }
        Ok(())
    }
}
