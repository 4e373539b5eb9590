//! Tag embeddings `emb(t)` and per-domain label matrices under each
//! knowledge strategy, plus domain mask vectors.
//!
//! Knowledge-derived embeddings all share the block form
//! `[IOB one-hot (3 dims); slot vector]`, with the IOB order fixed as
//! (B, I, O). The `O` tag gets a zero slot vector under the atomic and
//! exemplar strategies and an entirely zero embedding under the
//! description strategies.

use serde::{Deserialize, Serialize};

use crate::corpus::{CtxVectors, DomainKnowledge, Exemplar, TagLabel, WordEmbeddings};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor, UNIT_NORM_EPS};

/// How tag embeddings are constructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "onehot")]
    OneHot,
    #[serde(rename = "atomic")]
    AtomicConcept,
    #[serde(rename = "desc-mean")]
    DescMean,
    #[serde(rename = "desc-blstm")]
    DescBlstm,
    #[serde(rename = "desc-cnn")]
    DescCnn,
    #[serde(rename = "ex-wordemb")]
    ExemplarWordEmb,
    #[serde(rename = "ex-ctx")]
    ExemplarContextual,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::OneHot,
        Strategy::AtomicConcept,
        Strategy::DescMean,
        Strategy::DescBlstm,
        Strategy::DescCnn,
        Strategy::ExemplarWordEmb,
        Strategy::ExemplarContextual,
    ];

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "onehot" => Ok(Strategy::OneHot),
            "atomic" => Ok(Strategy::AtomicConcept),
            "desc-mean" => Ok(Strategy::DescMean),
            "desc-blstm" => Ok(Strategy::DescBlstm),
            "desc-cnn" => Ok(Strategy::DescCnn),
            "ex-wordemb" => Ok(Strategy::ExemplarWordEmb),
            "ex-ctx" => Ok(Strategy::ExemplarContextual),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected one of onehot, atomic, desc-mean, desc-blstm, desc-cnn, ex-wordemb, ex-ctx)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::OneHot => "onehot",
            Strategy::AtomicConcept => "atomic",
            Strategy::DescMean => "desc-mean",
            Strategy::DescBlstm => "desc-blstm",
            Strategy::DescCnn => "desc-cnn",
            Strategy::ExemplarWordEmb => "ex-wordemb",
            Strategy::ExemplarContextual => "ex-ctx",
        }
    }

    pub fn is_desc(&self) -> bool {
        matches!(self, Strategy::DescMean | Strategy::DescBlstm | Strategy::DescCnn)
    }

    pub fn is_exemplar(&self) -> bool {
        matches!(self, Strategy::ExemplarWordEmb | Strategy::ExemplarContextual)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How a label matrix's values relate to the model parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// OneHot identity.
    Identity,
    /// Derived once from knowledge; never changes during training.
    Fixed,
    /// Recomputed from the trainable description encoder every step.
    TrainableEncoder,
}

/// The matrix `B_d`: one column per tag of a domain.
#[derive(Clone, Debug)]
pub struct LabelMatrix {
    pub tags: Vec<TagLabel>,
    /// `K x |tags|`; column `j` is `emb(tags[j])`.
    pub matrix: Tensor,
    pub provenance: Provenance,
}

impl LabelMatrix {
    pub fn embedding_len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.matrix.rows()).map(|r| self.matrix.get(r, j)).collect()
    }
}

/// IOB one-hot in the fixed (B, I, O) order.
pub fn iob_onehot(tag: &TagLabel) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[tag.iob() as usize] = 1.0;
    v
}

/// Atomic-concept embedding: `[o(IOB(t)); b(atoms(SLOT(t)))]` over the
/// given atom ordering. `O` has a zero atom block.
pub fn tag_embedding_atomic(
    tag: &TagLabel,
    atom_vocab: &[String],
    knowledge: &DomainKnowledge,
) -> Result<Tensor> {
    let mut data = vec![0.0; 3 + atom_vocab.len()];
    data[..3].copy_from_slice(&iob_onehot(tag));
    if let Some(slot) = tag.slot() {
        let slot_k = knowledge.slot(slot)?;
        if slot_k.atoms.is_empty() {
            return Err(Error::LabelSpace(format!(
                "slot `{slot}` has no atoms but the atomic strategy is selected"
            )));
        }
        for atom in &slot_k.atoms {
            let pos = atom_vocab
                .iter()
                .position(|a| a == atom)
                .ok_or_else(|| {
                    Error::LabelSpace(format!("atom `{atom}` of slot `{slot}` not in the atom vocabulary"))
                })?;
            data[3 + pos] = 1.0;
        }
    }
    Ok(Tensor::from_vec(1, 3 + atom_vocab.len(), data))
}

/// Mean-of-word-embeddings description encoder (unit-normalized),
/// differentiable into the shared embedding table.
pub fn encode_description_mean(
    tape: &mut Tape,
    desc_embeds: NodeId,
) -> NodeId {
    let mean = tape.mean_rows(desc_embeds);
    tape.unit_normalize(mean)
}

/// BLSTM description encoder: concatenation of the final forward and
/// final backward states, unit-normalized.
pub fn encode_description_blstm(
    tape: &mut Tape,
    fwd: &crate::encoder::LstmCellNodes,
    bwd: &crate::encoder::LstmCellNodes,
    desc_embeds: NodeId,
) -> NodeId {
    let (_, f_last) = crate::encoder::run_direction(tape, fwd, desc_embeds, false);
    let (_, b_first) = crate::encoder::run_direction(tape, bwd, desc_embeds, true);
    let cat = tape.concat_cols(&[f_last, b_first]);
    tape.unit_normalize(cat)
}

/// CNN description encoder: linear map over each `k`-token window of the
/// zero-padded sequence, max-over-time per channel, unit norm.
pub fn encode_description_cnn(
    tape: &mut Tape,
    conv_w: NodeId,
    conv_b: NodeId,
    desc_embeds: NodeId,
    window: usize,
) -> NodeId {
    assert!(window % 2 == 1, "cnn window must be odd");
    let len = tape.value(desc_embeds).rows();
    let dim = tape.value(desc_embeds).cols();
    let pad = window / 2;
    let zero = tape.input(Tensor::zeros(pad, dim));
    let padded = tape.concat_rows(&[zero, desc_embeds, zero]);
    let windows: Vec<NodeId> = (0..len)
        .map(|i| {
            let parts: Vec<NodeId> = (0..window).map(|o| tape.slice_rows(padded, i + o, 1)).collect();
            tape.concat_cols(&parts)
        })
        .collect();
    let stacked = tape.concat_rows(&windows);
    let feats = tape.matmul(stacked, conv_w);
    let feats = tape.add_row_broadcast(feats, conv_b);
    let pooled = tape.max_rows(feats);
    tape.unit_normalize(pooled)
}

fn average_rows(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if rows.is_empty() {
        return out;
    }
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > UNIT_NORM_EPS {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Frozen word-embedding exemplar encoder: averages of the left-context,
/// value, and right-context embeddings, concatenated and unit-normalized.
/// Words missing from the table contribute zero vectors.
pub fn encode_exemplar_wordemb(we: &WordEmbeddings, ex: &Exemplar) -> Result<Tensor> {
    if !(1 <= ex.sp && ex.sp <= ex.ep && ex.ep <= ex.tokens.len()) {
        return Err(Error::LabelSpace(format!(
            "exemplar span ({}, {}) out of range for {} tokens",
            ex.sp,
            ex.ep,
            ex.tokens.len()
        )));
    }
    let dim = we.dim();
    let embed = |tokens: &[String]| -> Vec<Vec<f64>> {
        tokens
            .iter()
            .map(|t| we.get(t).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; dim]))
            .collect()
    };
    let left = average_rows(&embed(&ex.tokens[..ex.sp - 1]), dim);
    let value = average_rows(&embed(&ex.tokens[ex.sp - 1..ex.ep]), dim);
    let right = average_rows(&embed(&ex.tokens[ex.ep..]), dim);
    let mut cat = left;
    cat.extend(value);
    cat.extend(right);
    Ok(Tensor::from_vec(1, 3 * dim, unit(cat)))
}

/// Frozen contextual exemplar encoder: span averages of the precomputed
/// forward and backward vectors, concatenated and unit-normalized.
pub fn encode_exemplar_contextual(fwd: &Tensor, bwd: &Tensor, ex: &Exemplar) -> Result<Tensor> {
    if fwd.rows() != ex.tokens.len() || bwd.rows() != ex.tokens.len() {
        return Err(Error::LabelSpace(format!(
            "contextual vectors have {} rows for a {}-token exemplar",
            fwd.rows(),
            ex.tokens.len()
        )));
    }
    let span_rows = |t: &Tensor| -> Vec<Vec<f64>> {
        (ex.sp - 1..ex.ep).map(|r| t.row(r).to_vec()).collect()
    };
    let mut cat = average_rows(&span_rows(fwd), fwd.cols());
    cat.extend(average_rows(&span_rows(bwd), bwd.cols()));
    let len = cat.len();
    Ok(Tensor::from_vec(1, len, unit(cat)))
}

/// Frozen inputs for the exemplar strategies.
#[derive(Clone, Copy)]
pub struct ExemplarInputs<'a> {
    pub word_embeddings: Option<&'a WordEmbeddings>,
    pub ctx_vectors: Option<&'a CtxVectors>,
    /// Use at most this many exemplars per slot.
    pub cap: Option<usize>,
}

/// Slot vector for an exemplar strategy: average of per-exemplar unit
/// vectors, re-normalized so every slot vector stays on the unit sphere.
pub fn slot_embedding_exemplar(
    knowledge: &DomainKnowledge,
    slot: &str,
    strategy: Strategy,
    inputs: &ExemplarInputs,
) -> Result<Tensor> {
    let slot_k = knowledge.slot(slot)?;
    if slot_k.exemplars.is_empty() {
        return Err(Error::LabelSpace(format!(
            "slot `{slot}` of domain `{}` has no exemplars",
            knowledge.domain
        )));
    }
    let take = inputs.cap.unwrap_or(usize::MAX).min(slot_k.exemplars.len());
    let mut encoded: Vec<Tensor> = Vec::with_capacity(take);
    for (i, ex) in slot_k.exemplars.iter().take(take).enumerate() {
        let v = match strategy {
            Strategy::ExemplarWordEmb => {
                let we = inputs.word_embeddings.ok_or_else(|| {
                    Error::LabelSpace("ex-wordemb strategy requires a word-embedding file".into())
                })?;
                encode_exemplar_wordemb(we, ex)?
            }
            Strategy::ExemplarContextual => {
                let ctx = inputs.ctx_vectors.ok_or_else(|| {
                    Error::LabelSpace("ex-ctx strategy requires a contextual-vector file".into())
                })?;
                let (fwd, bwd) = ctx.get(&knowledge.domain, slot, i).ok_or_else(|| {
                    Error::LabelSpace(format!(
                        "no contextual vectors for domain `{}` slot `{slot}` exemplar {i}",
                        knowledge.domain
                    ))
                })?;
                encode_exemplar_contextual(fwd, bwd, ex)?
            }
            other => {
                return Err(Error::LabelSpace(format!(
                    "slot_embedding_exemplar called with strategy {other}"
                )))
            }
        };
        encoded.push(v);
    }
    let dim = encoded[0].cols();
    let rows: Vec<Vec<f64>> = encoded.iter().map(|t| t.row(0).to_vec()).collect();
    Ok(Tensor::from_vec(1, dim, unit(average_rows(&rows, dim))))
}

/// Assemble a label matrix from per-tag embedding rows.
fn matrix_from_rows(tags: Vec<TagLabel>, rows: Vec<Tensor>, provenance: Provenance) -> LabelMatrix {
    let k = rows[0].cols();
    let mut matrix = Tensor::zeros(k, tags.len());
    for (j, row) in rows.iter().enumerate() {
        for r in 0..k {
            matrix.set(r, j, row.get(0, r));
        }
    }
    LabelMatrix { tags, matrix, provenance }
}

/// OneHot label matrix: the identity over the tag order.
pub fn build_label_matrix_onehot(tags: &[TagLabel]) -> LabelMatrix {
    LabelMatrix {
        tags: tags.to_vec(),
        matrix: Tensor::identity(tags.len()),
        provenance: Provenance::Identity,
    }
}

/// Atomic label matrix over the given atom ordering.
pub fn build_label_matrix_atomic(
    knowledge: &DomainKnowledge,
    atom_vocab: &[String],
    tags: &[TagLabel],
) -> Result<LabelMatrix> {
    let rows: Result<Vec<Tensor>> = tags
        .iter()
        .map(|t| tag_embedding_atomic(t, atom_vocab, knowledge))
        .collect();
    Ok(matrix_from_rows(tags.to_vec(), rows?, Provenance::Fixed))
}

/// Exemplar label matrix (frozen encoders). `emb(O) = [o(O); 0]`.
pub fn build_label_matrix_exemplar(
    knowledge: &DomainKnowledge,
    strategy: Strategy,
    inputs: &ExemplarInputs,
    tags: &[TagLabel],
) -> Result<LabelMatrix> {
    let mut slot_dim = None;
    let mut slot_vecs: std::collections::BTreeMap<&str, Tensor> = Default::default();
    for tag in tags {
        if let Some(slot) = tag.slot() {
            if !slot_vecs.contains_key(slot) {
                let v = slot_embedding_exemplar(knowledge, slot, strategy, inputs)?;
                slot_dim.get_or_insert(v.cols());
                slot_vecs.insert(slot, v);
            }
        }
    }
    let slot_dim = slot_dim.ok_or_else(|| {
        Error::LabelSpace("exemplar label matrix needs at least one slot tag".into())
    })?;
    let rows: Vec<Tensor> = tags
        .iter()
        .map(|t| {
            let mut data = vec![0.0; 3 + slot_dim];
            data[..3].copy_from_slice(&iob_onehot(t));
            if let Some(slot) = t.slot() {
                data[3..].copy_from_slice(slot_vecs[slot].row(0));
            }
            Tensor::from_vec(1, 3 + slot_dim, data)
        })
        .collect();
    Ok(matrix_from_rows(tags.to_vec(), rows, Provenance::Fixed))
}

/// Description label matrix from a caller-supplied slot encoder
/// (the encoder closes over the current parameter values). `emb(O) = 0`.
pub fn build_label_matrix_desc(
    knowledge: &DomainKnowledge,
    tags: &[TagLabel],
    slot_encoder: &mut dyn FnMut(&[String]) -> Result<Tensor>,
) -> Result<LabelMatrix> {
    let mut slot_dim = None;
    let mut slot_vecs: std::collections::BTreeMap<&str, Tensor> = Default::default();
    for tag in tags {
        if let Some(slot) = tag.slot() {
            if !slot_vecs.contains_key(slot) {
                let desc = &knowledge.slot(slot)?.description;
                if desc.is_empty() {
                    return Err(Error::LabelSpace(format!(
                        "slot `{slot}` has no description but a description strategy is selected"
                    )));
                }
                let v = slot_encoder(desc)?;
                slot_dim.get_or_insert(v.cols());
                slot_vecs.insert(slot, v);
            }
        }
    }
    let slot_dim = slot_dim.ok_or_else(|| {
        Error::LabelSpace("description label matrix needs at least one slot tag".into())
    })?;
    let rows: Vec<Tensor> = tags
        .iter()
        .map(|t| match t.slot() {
            // the O embedding is entirely zero under description strategies
            None => Tensor::zeros(1, 3 + slot_dim),
            Some(slot) => {
                let mut data = vec![0.0; 3 + slot_dim];
                data[..3].copy_from_slice(&iob_onehot(t));
                data[3..].copy_from_slice(slot_vecs[slot].row(0));
                Tensor::from_vec(1, 3 + slot_dim, data)
            }
        })
        .collect();
    Ok(matrix_from_rows(tags.to_vec(), rows, Provenance::TrainableEncoder))
}

/// Coordinate space a mask ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Coordinates are union tags.
    Tags,
    /// Coordinates are the 3 IOB dims plus union atoms; IOB is never masked.
    Atoms,
}

/// Which coordinates of a union output space a domain may use.
/// Masked entries are flagged symbolically rather than set to -inf, so
/// downstream code can exclude them without producing NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    pub mode: MaskMode,
    /// Coordinate names: rendered tags, or `B`/`I`/`O` plus atom names.
    pub coords: Vec<String>,
    pub masked: Vec<bool>,
}

impl MaskVector {
    pub fn unmasked_indices(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Mask for one domain over a union coordinate list.
pub fn build_mask(
    domain: &DomainKnowledge,
    union_coords: &[String],
    mode: MaskMode,
) -> Result<MaskVector> {
    let mut masked = vec![true; union_coords.len()];
    let unmask_names: Vec<String> = match mode {
        MaskMode::Tags => domain.tag_set().iter().map(|t| t.to_string()).collect(),
        MaskMode::Atoms => {
            let mut names: Vec<String> = ["B", "I", "O"].iter().map(|s| s.to_string()).collect();
            names.extend(domain.atom_set());
            names
        }
    };
    for name in &unmask_names {
        let pos = union_coords.iter().position(|c| c == name).ok_or_else(|| {
            Error::LabelSpace(format!(
                "domain `{}` coordinate `{name}` is not in the union space",
                domain.domain
            ))
        })?;
        masked[pos] = false;
    }
    Ok(MaskVector {
        mode,
        coords: union_coords.to_vec(),
        masked,
    })
}
