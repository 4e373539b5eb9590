//! The tagger model: named parameter tensors plus the per-domain forward
//! and decoding paths for every strategy and head combination.

use std::cell::RefCell;
use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CtxVectors, DomainKnowledge, Sentence, TagLabel, Vocabulary, WordEmbeddings};
use crate::encoder::{init_cell_params, BlstmConfig, BlstmNodes, LstmCellNodes, LstmDims, Mode};
use crate::error::{Error, Result};
use crate::heads;
use crate::labelspace::{
    self, ExemplarInputs, LabelMatrix, Provenance, Strategy,
};
use crate::numerics::{NodeId, Tape, Tensor};

/// Output layer family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "crf-scalar")]
    CrfScalar,
    #[serde(rename = "crf-bilinear")]
    CrfBilinear,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Softmax, HeadKind::CrfScalar, HeadKind::CrfBilinear];

    pub fn parse(s: &str) -> Result<HeadKind> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "crf-scalar" => Ok(HeadKind::CrfScalar),
            "crf-bilinear" => Ok(HeadKind::CrfBilinear),
            other => Err(Error::Config(format!(
                "unknown head `{other}` (expected softmax, crf-scalar, or crf-bilinear)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::CrfScalar => "crf-scalar",
            HeadKind::CrfBilinear => "crf-bilinear",
        }
    }

    pub fn is_crf(&self) -> bool {
        !matches!(self, HeadKind::Softmax)
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters (everything except the output space).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub head: HeadKind,
    /// Input embedding dimension m.
    pub embed_dim: usize,
    /// LSTM hidden size n per direction.
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    /// Description BLSTM hidden size per direction.
    pub desc_hidden: usize,
    pub cnn_channels: usize,
    pub cnn_window: usize,
    /// Description encoders read the sentence encoder's embedding table
    /// when true; otherwise they get their own table.
    pub desc_shares_input_embedding: bool,
    /// Input embeddings stay trainable (fine-tuned) when true.
    pub train_input_embeddings: bool,
}

/// The coordinate space the output layer scores into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OutputSpace {
    /// OneHot: each row of `W_o` is one tag.
    Tags { tags: Vec<TagLabel> },
    /// Atomic: 3 IOB dims plus this atom ordering.
    Atoms { atoms: Vec<String> },
    /// Description/exemplar strategies: a K-dimensional embedding space.
    Encoded { k: usize },
}

impl OutputSpace {
    /// Length of emission-side tag embeddings (rows of C, or of W_o for
    /// the OneHot low-rank view where embeddings are W_o rows).
    pub fn embedding_len(&self, hidden: usize) -> usize {
        match self {
            OutputSpace::Tags { .. } => 2 * hidden,
            OutputSpace::Atoms { atoms } => 3 + atoms.len(),
            OutputSpace::Encoded { k } => *k,
        }
    }
}

/// Ordered named parameter tensors. The `version` counter bumps on every
/// optimizer step so derived caches can detect staleness.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        let slot = self.get_mut(name);
        assert_eq!(slot.shape(), value.shape(), "shape change for {name}");
        *slot = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// Frozen external inputs used by the exemplar strategies.
#[derive(Clone, Debug, Default)]
pub struct FrozenInputs {
    pub word_embeddings: Option<WordEmbeddings>,
    pub ctx_vectors: Option<CtxVectors>,
}

/// A complete tagger.
#[derive(Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub space: OutputSpace,
    /// Tag axis of the scalar CRF transition matrix (domain tags for
    /// single-domain models, union tags after pretraining).
    pub scalar_tags: Option<Vec<TagLabel>>,
    pub frozen: FrozenInputs,
    transition_cache: RefCell<BTreeMap<String, Tensor>>,
}

/// How a domain view is constructed.
#[derive(Clone, Debug)]
pub struct ViewOptions {
    /// Drop tags the model cannot score instead of erroring; used for
    /// zero-shot evaluation of a source model on a new domain.
    pub zero_shot: bool,
    /// Use at most this many exemplars per slot.
    pub exemplar_cap: Option<usize>,
}

impl Default for ViewOptions {
    fn default() -> Self {
        ViewOptions { zero_shot: false, exemplar_cap: None }
    }
}

/// Emission-side structure of a view.
#[derive(Clone, Debug)]
pub enum ViewKind {
    /// View tags equal the model's tag space in order; `Z = H W_o^T`.
    OneHotFull,
    /// Columns of the model tag space to keep, in view order.
    OneHotSelect { cols: Vec<usize> },
    /// Fixed label matrix (atomic and exemplar strategies).
    FixedB { b: Tensor },
    /// Description strategies: per-slot descriptions to encode, plus the
    /// matrix values under the current parameters (for decoding).
    DescB {
        slots: Vec<(String, Vec<String>)>,
        b_values: Tensor,
    },
}

/// Scalar-transition restriction of a view.
#[derive(Clone, Debug)]
pub enum ScalarSel {
    /// View tags equal the scalar tag axis in order.
    Full,
    /// Indices of the view tags within the scalar axis.
    Sub(Vec<usize>),
    /// Precomputed matrix for zero-shot views whose tags are not all on
    /// the scalar axis (missing entries are 0); evaluation only.
    Frozen(Tensor),
}

/// Everything needed to score and decode one domain with this model.
#[derive(Clone, Debug)]
pub struct DomainView {
    pub domain: String,
    /// Live tags in canonical order (restricted in zero-shot mode).
    pub tags: Vec<TagLabel>,
    /// Tags of the domain the model cannot score (zero-shot mode only).
    pub dropped: Vec<TagLabel>,
    pub kind: ViewKind,
    pub scalar: Option<ScalarSel>,
    tag_index: BTreeMap<TagLabel, usize>,
}

impl DomainView {
    pub fn tag_to_index(&self, tag: &TagLabel) -> Option<usize> {
        self.tag_index.get(tag).copied()
    }

    fn signature(&self) -> String {
        let tags: Vec<String> = self.tags.iter().map(|t| t.to_string()).collect();
        format!("{}|{}", self.domain, tags.join(","))
    }
}

impl Model {
    /// Initialize a fresh model. All weights are uniform in
    /// `[-init_range, init_range]` except the forget-gate biases (1.0)
    /// and any rows of the input embedding found in `pretrained`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        cfg: ModelConfig,
        vocab: Vocabulary,
        space: OutputSpace,
        scalar_tags: Option<Vec<TagLabel>>,
        frozen: FrozenInputs,
        init_range: f64,
        seed: u64,
        pretrained: Option<&WordEmbeddings>,
    ) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let m = cfg.embed_dim;
        let n = cfg.hidden;

        let mut w_in = Tensor::uniform(vocab.len(), m, init_range, &mut rng);
        if let Some(pre) = pretrained {
            if pre.dim() != m {
                return Err(Error::Config(format!(
                    "pretrained embeddings have dim {}, model uses {}",
                    pre.dim(),
                    m
                )));
            }
            for (i, word) in vocab.words().iter().enumerate() {
                if let Some(vec) = pre.get(word) {
                    w_in.row_mut(i).copy_from_slice(vec);
                }
            }
        }
        params.insert("embed.w_in", w_in);

        for layer in 0..cfg.layers {
            let input = if layer == 0 { m } else { 2 * n };
            for dir in ["fwd", "bwd"] {
                let (w_x, w_h, bias) =
                    init_cell_params(LstmDims { input, hidden: n }, init_range, &mut rng);
                params.insert(format!("enc.l{layer}.{dir}.w_x"), w_x);
                params.insert(format!("enc.l{layer}.{dir}.w_h"), w_h);
                params.insert(format!("enc.l{layer}.{dir}.bias"), bias);
            }
        }

        match &space {
            OutputSpace::Tags { tags } => {
                params.insert(
                    "out.w_o",
                    Tensor::uniform(tags.len(), 2 * n, init_range, &mut rng),
                );
            }
            OutputSpace::Atoms { atoms } => {
                params.insert(
                    "out.proj_c",
                    Tensor::uniform(3 + atoms.len(), 2 * n, init_range, &mut rng),
                );
            }
            OutputSpace::Encoded { k } => {
                params.insert("out.proj_c", Tensor::uniform(*k, 2 * n, init_range, &mut rng));
            }
        }

        match cfg.strategy {
            Strategy::DescBlstm => {
                for dir in ["fwd", "bwd"] {
                    let (w_x, w_h, bias) = init_cell_params(
                        LstmDims { input: m, hidden: cfg.desc_hidden },
                        init_range,
                        &mut rng,
                    );
                    params.insert(format!("desc.{dir}.w_x"), w_x);
                    params.insert(format!("desc.{dir}.w_h"), w_h);
                    params.insert(format!("desc.{dir}.bias"), bias);
                }
            }
            Strategy::DescCnn => {
                params.insert(
                    "desc.conv_w",
                    Tensor::uniform(cfg.cnn_window * m, cfg.cnn_channels, init_range, &mut rng),
                );
                params.insert(
                    "desc.conv_b",
                    Tensor::uniform(1, cfg.cnn_channels, init_range, &mut rng),
                );
            }
            _ => {}
        }
        if cfg.strategy.is_desc() && !cfg.desc_shares_input_embedding {
            params.insert(
                "desc.w_in",
                Tensor::uniform(vocab.len(), m, init_range, &mut rng),
            );
        }

        match cfg.head {
            HeadKind::Softmax => {}
            HeadKind::CrfScalar => {
                let tags = scalar_tags.as_ref().ok_or_else(|| {
                    Error::Config("crf-scalar head needs a scalar tag axis".into())
                })?;
                params.insert(
                    "trans.a",
                    Tensor::uniform(tags.len() + 1, tags.len(), init_range, &mut rng),
                );
            }
            HeadKind::CrfBilinear => {
                let k = space.embedding_len(n);
                params.insert("trans.w_a", Tensor::uniform(k, k, init_range, &mut rng));
                params.insert("trans.start", Tensor::uniform(1, k, init_range, &mut rng));
            }
        }

        Ok(Model {
            cfg,
            vocab,
            params,
            space,
            scalar_tags,
            frozen,
            transition_cache: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn from_parts(
        cfg: ModelConfig,
        vocab: Vocabulary,
        params: ParamStore,
        space: OutputSpace,
        scalar_tags: Option<Vec<TagLabel>>,
        frozen: FrozenInputs,
    ) -> Model {
        Model {
            cfg,
            vocab,
            params,
            space,
            scalar_tags,
            frozen,
            transition_cache: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn blstm_config(&self) -> BlstmConfig {
        BlstmConfig {
            layers: self.cfg.layers,
            input: self.cfg.embed_dim,
            hidden: self.cfg.hidden,
            dropout: self.cfg.dropout,
        }
    }

    /// View of one domain over the canonical tag set of its knowledge.
    pub fn domain_view(&self, knowledge: &DomainKnowledge, opts: &ViewOptions) -> Result<DomainView> {
        let tags = knowledge.tag_set();
        self.domain_view_for_tags(knowledge, &tags, opts)
    }

    /// View over an explicit tag list (tags must belong to the domain's
    /// slots, or be `O`).
    pub fn domain_view_for_tags(
        &self,
        knowledge: &DomainKnowledge,
        tags: &[TagLabel],
        opts: &ViewOptions,
    ) -> Result<DomainView> {
        let mut live: Vec<TagLabel> = Vec::new();
        let mut dropped: Vec<TagLabel> = Vec::new();

        let kind = match (&self.cfg.strategy, &self.space) {
            (Strategy::OneHot, OutputSpace::Tags { tags: space_tags }) => {
                let mut cols = Vec::new();
                for tag in tags {
                    match space_tags.iter().position(|t| t == tag) {
                        Some(pos) => {
                            live.push(tag.clone());
                            cols.push(pos);
                        }
                        None if opts.zero_shot => dropped.push(tag.clone()),
                        None => {
                            return Err(Error::LabelSpace(format!(
                                "tag `{tag}` is not in the model's output space; transfer parameters first"
                            )))
                        }
                    }
                }
                let full = live.len() == space_tags.len()
                    && cols.iter().enumerate().all(|(i, &c)| i == c);
                if full {
                    ViewKind::OneHotFull
                } else {
                    ViewKind::OneHotSelect { cols }
                }
            }
            (Strategy::AtomicConcept, OutputSpace::Atoms { atoms }) => {
                for tag in tags {
                    let ok = match tag.slot() {
                        None => true,
                        Some(slot) => {
                            let sk = knowledge.slot(slot)?;
                            !sk.atoms.is_empty() && sk.atoms.iter().all(|a| atoms.contains(a))
                        }
                    };
                    if ok {
                        live.push(tag.clone());
                    } else if opts.zero_shot {
                        dropped.push(tag.clone());
                    } else {
                        return Err(Error::LabelSpace(format!(
                            "tag `{tag}` uses atoms outside the model's atom space"
                        )));
                    }
                }
                let b = labelspace::build_label_matrix_atomic(knowledge, atoms, &live)?;
                ViewKind::FixedB { b: b.matrix }
            }
            (s, OutputSpace::Encoded { k }) if s.is_desc() => {
                for tag in tags {
                    let ok = match tag.slot() {
                        None => true,
                        Some(slot) => !knowledge.slot(slot)?.description.is_empty(),
                    };
                    if ok {
                        live.push(tag.clone());
                    } else if opts.zero_shot {
                        dropped.push(tag.clone());
                    } else {
                        return Err(Error::LabelSpace(format!(
                            "tag `{tag}` has no slot description"
                        )));
                    }
                }
                let mut slots: Vec<(String, Vec<String>)> = Vec::new();
                for tag in &live {
                    if let Some(slot) = tag.slot() {
                        if !slots.iter().any(|(s, _)| s == slot) {
                            slots.push((slot.to_string(), knowledge.slot(slot)?.description.clone()));
                        }
                    }
                }
                let b = self.desc_label_matrix_values(&live, &slots)?;
                if b.rows() != *k {
                    return Err(Error::LabelSpace(format!(
                        "description embedding length {} does not match model K={k}",
                        b.rows()
                    )));
                }
                ViewKind::DescB { slots, b_values: b }
            }
            (s, OutputSpace::Encoded { k }) if s.is_exemplar() => {
                for tag in tags {
                    let ok = match tag.slot() {
                        None => true,
                        Some(slot) => !knowledge.slot(slot)?.exemplars.is_empty(),
                    };
                    if ok {
                        live.push(tag.clone());
                    } else if opts.zero_shot {
                        dropped.push(tag.clone());
                    } else {
                        return Err(Error::LabelSpace(format!("tag `{tag}` has no exemplars")));
                    }
                }
                let inputs = ExemplarInputs {
                    word_embeddings: self.frozen.word_embeddings.as_ref(),
                    ctx_vectors: self.frozen.ctx_vectors.as_ref(),
                    cap: opts.exemplar_cap,
                };
                let b = labelspace::build_label_matrix_exemplar(
                    knowledge,
                    self.cfg.strategy,
                    &inputs,
                    &live,
                )?;
                if b.matrix.rows() != *k {
                    return Err(Error::LabelSpace(format!(
                        "exemplar embedding length {} does not match model K={k}",
                        b.matrix.rows()
                    )));
                }
                ViewKind::FixedB { b: b.matrix }
            }
            (s, space) => {
                return Err(Error::LabelSpace(format!(
                    "strategy {s} is inconsistent with the model's output space {space:?}"
                )))
            }
        };

        let scalar = match self.cfg.head {
            HeadKind::CrfScalar => {
                let axis = self.scalar_tags.as_ref().ok_or_else(|| {
                    Error::Config("crf-scalar model lacks a scalar tag axis".into())
                })?;
                let positions: Vec<Option<usize>> = live
                    .iter()
                    .map(|t| axis.iter().position(|a| a == t))
                    .collect();
                if positions.iter().all(Option::is_some) {
                    let idx: Vec<usize> = positions.into_iter().map(Option::unwrap).collect();
                    let full = idx.len() == axis.len()
                        && idx.iter().enumerate().all(|(i, &c)| i == c);
                    if full {
                        Some(ScalarSel::Full)
                    } else {
                        Some(ScalarSel::Sub(idx))
                    }
                } else if opts.zero_shot {
                    // tags beyond the trained axis: unavailable transitions are 0
                    let a = self.params.get("trans.a");
                    let nt = live.len();
                    let mut frozen = Tensor::zeros(nt + 1, nt);
                    for (vj, pj) in positions.iter().enumerate() {
                        let Some(j) = pj else { continue };
                        frozen.set(nt, vj, a.get(axis.len(), *j));
                        for (vk, pk) in positions.iter().enumerate() {
                            if let Some(k2) = pk {
                                frozen.set(vk, vj, a.get(*k2, *j));
                            }
                        }
                    }
                    Some(ScalarSel::Frozen(frozen))
                } else {
                    return Err(Error::LabelSpace(
                        "domain tags missing from the scalar transition axis; transfer parameters first"
                            .into(),
                    ));
                }
            }
            _ => None,
        };

        let tag_index = live
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(DomainView {
            domain: knowledge.domain.clone(),
            tags: live,
            dropped,
            kind,
            scalar,
            tag_index,
        })
    }

    /// Label-matrix values for a domain under the current parameters
    /// (identity for OneHot). Used for inspection and `dump-label-emb`.
    pub fn label_matrix_values(
        &self,
        knowledge: &DomainKnowledge,
        opts: &ViewOptions,
    ) -> Result<LabelMatrix> {
        let view = self.domain_view(knowledge, opts)?;
        let provenance = match &view.kind {
            ViewKind::OneHotFull | ViewKind::OneHotSelect { .. } => Provenance::Identity,
            ViewKind::FixedB { .. } => Provenance::Fixed,
            ViewKind::DescB { .. } => Provenance::TrainableEncoder,
        };
        let matrix = match &view.kind {
            ViewKind::OneHotFull | ViewKind::OneHotSelect { .. } => {
                Tensor::identity(view.tags.len())
            }
            ViewKind::FixedB { b } => b.clone(),
            ViewKind::DescB { b_values, .. } => b_values.clone(),
        };
        Ok(LabelMatrix { tags: view.tags, matrix, provenance })
    }

    /// Description label-matrix values under the current parameters.
    fn desc_label_matrix_values(
        &self,
        tags: &[TagLabel],
        slots: &[(String, Vec<String>)],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, self);
        let mut slot_nodes: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (slot, desc) in slots {
            let node = bound.desc_slot_vector(&mut tape, desc);
            slot_nodes.insert(slot.as_str(), node);
        }
        let k = self.space.embedding_len(self.cfg.hidden);
        let mut knowledge_map: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (slot, node) in &slot_nodes {
            knowledge_map.insert(slot, tape.value(*node).row(0).to_vec());
        }
        let mut b = Tensor::zeros(k, tags.len());
        for (j, tag) in tags.iter().enumerate() {
            match tag.slot() {
                None => {} // emb(O) = 0 under description strategies
                Some(slot) => {
                    let iob = labelspace::iob_onehot(tag);
                    for (r, v) in iob.iter().enumerate() {
                        b.set(r, j, *v);
                    }
                    let sv = knowledge_map.get(slot).ok_or_else(|| {
                        Error::LabelSpace(format!("no description vector for slot `{slot}`"))
                    })?;
                    for (r, v) in sv.iter().enumerate() {
                        b.set(3 + r, j, *v);
                    }
                }
            }
        }
        Ok(b)
    }

    /// Transition matrix values for decoding (cached per parameter
    /// version and view signature; `None` for the softmax head).
    pub fn transitions_values(&self, view: &DomainView) -> Option<Tensor> {
        match self.cfg.head {
            HeadKind::Softmax => None,
            HeadKind::CrfScalar => {
                let a = self.params.get("trans.a");
                match view.scalar.as_ref().expect("scalar view") {
                    ScalarSel::Full => Some(a.clone()),
                    ScalarSel::Sub(idx) => {
                        let nt = idx.len();
                        let axis_len = a.rows() - 1;
                        let mut out = Tensor::zeros(nt + 1, nt);
                        for (vj, &j) in idx.iter().enumerate() {
                            out.set(nt, vj, a.get(axis_len, j));
                            for (vk, &k2) in idx.iter().enumerate() {
                                out.set(vk, vj, a.get(k2, j));
                            }
                        }
                        Some(out)
                    }
                    ScalarSel::Frozen(t) => Some(t.clone()),
                }
            }
            HeadKind::CrfBilinear => {
                let key = format!("{}|v{}", view.signature(), self.params.version());
                if let Some(hit) = self.transition_cache.borrow().get(&key) {
                    return Some(hit.clone());
                }
                let b = match &view.kind {
                    ViewKind::OneHotFull => self.params.get("out.w_o").transposed(),
                    ViewKind::OneHotSelect { cols } => {
                        let w_o = self.params.get("out.w_o");
                        let mut b = Tensor::zeros(w_o.cols(), cols.len());
                        for (j, &row) in cols.iter().enumerate() {
                            for r in 0..w_o.cols() {
                                b.set(r, j, w_o.get(row, r));
                            }
                        }
                        b
                    }
                    ViewKind::FixedB { b } => b.clone(),
                    ViewKind::DescB { b_values, .. } => b_values.clone(),
                };
                let w_a = self.params.get("trans.w_a");
                let start = self.params.get("trans.start");
                let body = b.transposed().matmul(&w_a.matmul(&b));
                let start_row = start.matmul(w_a).matmul(&b);
                let nt = b.cols();
                let mut out = Tensor::zeros(nt + 1, nt);
                for j in 0..nt {
                    for k2 in 0..nt {
                        out.set(k2, j, body.get(k2, j));
                    }
                    out.set(nt, j, start_row.get(0, j));
                }
                self.transition_cache.borrow_mut().insert(key, out.clone());
                Some(out)
            }
        }
    }

    /// Decode sentences for one domain; dropped-by-restriction tags can
    /// never be produced.
    pub fn predict(
        &self,
        sentences: &[Sentence],
        knowledge: &DomainKnowledge,
        opts: &ViewOptions,
    ) -> Result<Vec<Vec<TagLabel>>> {
        let view = self.domain_view(knowledge, opts)?;
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, self);
        let domain = bound.bind_domain(&mut tape, &view)?;
        let transitions = self.transitions_values(&view);
        let mut out = Vec::with_capacity(sentences.len());
        for sentence in sentences {
            let indices =
                bound.decode_tokens(&mut tape, &domain, &sentence.tokens, transitions.as_ref());
            out.push(indices.into_iter().map(|i| view.tags[i].clone()).collect());
        }
        Ok(out)
    }
}

/// Model parameters registered on a tape.
pub struct BoundModel<'m> {
    pub model: &'m Model,
    nodes: IndexMap<String, NodeId>,
}

/// Per-domain nodes for a forward pass.
pub struct BoundDomain {
    /// Label matrix node (`K x |T|`) for knowledge strategies.
    pub b_node: Option<NodeId>,
    /// OneHot column restriction.
    pub cols: Option<Vec<usize>>,
    /// Transition node `(|T|+1) x |T|` for CRF heads.
    pub a_node: Option<NodeId>,
}

impl<'m> BoundModel<'m> {
    /// Register every parameter tensor as a tape leaf. The input
    /// embedding becomes a constant when fine-tuning froze it.
    pub fn bind(tape: &mut Tape, model: &'m Model) -> BoundModel<'m> {
        let mut nodes = IndexMap::new();
        for (name, tensor) in model.params.iter() {
            let id = if name == "embed.w_in" && !model.cfg.train_input_embeddings {
                tape.input(tensor.clone())
            } else {
                tape.param(tensor.clone())
            };
            nodes.insert(name.clone(), id);
        }
        BoundModel { model, nodes }
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }

    fn encoder_stack(&self) -> BlstmNodes {
        let cells = (0..self.model.cfg.layers)
            .map(|layer| {
                let cell = |dir: &str| LstmCellNodes {
                    w_x: self.node(&format!("enc.l{layer}.{dir}.w_x")),
                    w_h: self.node(&format!("enc.l{layer}.{dir}.w_h")),
                    bias: self.node(&format!("enc.l{layer}.{dir}.bias")),
                    hidden: self.model.cfg.hidden,
                };
                (cell("fwd"), cell("bwd"))
            })
            .collect();
        BlstmNodes { cells }
    }

    /// Hidden states `H` (`N x 2n`) for a token sequence.
    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        tokens: &[String],
        mode: Mode,
        rng: &mut R,
    ) -> NodeId {
        let ids = self.model.vocab.indices(tokens);
        let stack = self.encoder_stack();
        let cfg = self.model.blstm_config();
        crate::encoder::encode_tokens(tape, self.node("embed.w_in"), &stack, &cfg, &ids, mode, rng)
    }

    /// Slot vector node for a description under the active strategy.
    pub fn desc_slot_vector(&self, tape: &mut Tape, desc: &[String]) -> NodeId {
        let embed_node = if self.model.cfg.desc_shares_input_embedding {
            self.node("embed.w_in")
        } else {
            self.node("desc.w_in")
        };
        let ids = self.model.vocab.indices(desc);
        let embeds = tape.gather_rows(embed_node, &ids);
        match self.model.cfg.strategy {
            Strategy::DescMean => labelspace::encode_description_mean(tape, embeds),
            Strategy::DescBlstm => {
                let cell = |dir: &str| LstmCellNodes {
                    w_x: self.node(&format!("desc.{dir}.w_x")),
                    w_h: self.node(&format!("desc.{dir}.w_h")),
                    bias: self.node(&format!("desc.{dir}.bias")),
                    hidden: self.model.cfg.desc_hidden,
                };
                labelspace::encode_description_blstm(tape, &cell("fwd"), &cell("bwd"), embeds)
            }
            Strategy::DescCnn => labelspace::encode_description_cnn(
                tape,
                self.node("desc.conv_w"),
                self.node("desc.conv_b"),
                embeds,
                self.model.cfg.cnn_window,
            ),
            s => panic!("desc_slot_vector called for strategy {s}"),
        }
    }

    /// Description label matrix built on the tape (gradients flow into
    /// the encoders).
    fn desc_label_matrix_node(
        &self,
        tape: &mut Tape,
        view: &DomainView,
        slots: &[(String, Vec<String>)],
    ) -> NodeId {
        let mut slot_nodes: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (slot, desc) in slots {
            slot_nodes.insert(slot.as_str(), self.desc_slot_vector(tape, desc));
        }
        let k = self.model.space.embedding_len(self.model.cfg.hidden);
        let rows: Vec<NodeId> = view
            .tags
            .iter()
            .map(|tag| match tag.slot() {
                None => tape.input(Tensor::zeros(1, k)),
                Some(slot) => {
                    let iob = tape.input(Tensor::row_vector(&labelspace::iob_onehot(tag)));
                    tape.concat_cols(&[iob, slot_nodes[slot]])
                }
            })
            .collect();
        let stacked = tape.concat_rows(&rows); // |T| x K
        tape.transpose(stacked)
    }

    /// Build the per-domain nodes (label matrix and transitions).
    pub fn bind_domain(&self, tape: &mut Tape, view: &DomainView) -> Result<BoundDomain> {
        let (b_node, cols) = match &view.kind {
            ViewKind::OneHotFull => (None, None),
            ViewKind::OneHotSelect { cols } => (None, Some(cols.clone())),
            ViewKind::FixedB { b } => (Some(tape.input(b.clone())), None),
            ViewKind::DescB { slots, .. } => {
                (Some(self.desc_label_matrix_node(tape, view, slots)), None)
            }
        };

        let a_node = match self.model.cfg.head {
            HeadKind::Softmax => None,
            HeadKind::CrfScalar => {
                let a = self.node("trans.a");
                let node = match view.scalar.as_ref().expect("scalar view") {
                    ScalarSel::Full => a,
                    ScalarSel::Sub(idx) => {
                        let axis_len = self.model.scalar_tags.as_ref().unwrap().len();
                        let cols_sel = tape.gather_cols(a, idx);
                        let mut rows: Vec<usize> = idx.clone();
                        rows.push(axis_len); // start row stays last
                        tape.gather_rows(cols_sel, &rows)
                    }
                    ScalarSel::Frozen(t) => tape.input(t.clone()),
                };
                Some(node)
            }
            HeadKind::CrfBilinear => {
                let b = match (&view.kind, b_node) {
                    (ViewKind::OneHotFull, _) => {
                        let w_o = self.node("out.w_o");
                        tape.transpose(w_o)
                    }
                    (ViewKind::OneHotSelect { cols }, _) => {
                        let w_o = self.node("out.w_o");
                        let t = tape.transpose(w_o);
                        tape.gather_cols(t, cols)
                    }
                    (_, Some(b)) => b,
                    _ => unreachable!("knowledge view without label matrix"),
                };
                let w_a = self.node("trans.w_a");
                let start = self.node("trans.start");
                Some(heads::bilinear_transitions(tape, b, w_a, start))
            }
        };

        Ok(BoundDomain { b_node, cols, a_node })
    }

    /// Emission scores for hidden states under a domain binding.
    pub fn emissions(&self, tape: &mut Tape, domain: &BoundDomain, h: NodeId) -> NodeId {
        let proj = match self.model.space {
            OutputSpace::Tags { .. } => self.node("out.w_o"),
            _ => self.node("out.proj_c"),
        };
        heads::emission_scores(tape, h, proj, domain.b_node, domain.cols.as_deref())
    }

    /// Negative log-likelihood of one sentence.
    pub fn sentence_nll<R: Rng>(
        &self,
        tape: &mut Tape,
        domain: &BoundDomain,
        view: &DomainView,
        sentence: &Sentence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let gold: Result<Vec<usize>> = sentence
            .tags
            .iter()
            .map(|t| {
                view.tag_to_index(t).ok_or_else(|| {
                    Error::Training(format!(
                        "gold tag `{t}` is outside the reachable tag set of domain `{}`",
                        view.domain
                    ))
                })
            })
            .collect();
        let gold = gold?;
        let h = self.encode(tape, &sentence.tokens, mode, rng);
        let z = self.emissions(tape, domain, h);
        let loss = match self.model.cfg.head {
            HeadKind::Softmax => heads::softmax_nll(tape, z, &gold),
            HeadKind::CrfScalar | HeadKind::CrfBilinear => {
                heads::crf_nll(tape, z, domain.a_node.expect("crf binding"), &gold)
            }
        };
        Ok(loss)
    }

    /// Decode one token sequence to view-tag indices (evaluation mode).
    pub fn decode_tokens(
        &self,
        tape: &mut Tape,
        domain: &BoundDomain,
        tokens: &[String],
        transitions: Option<&Tensor>,
    ) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
        let h = self.encode(tape, tokens, Mode::Eval, &mut rng);
        let z = self.emissions(tape, domain, h);
        let z_val = tape.value(z);
        match self.model.cfg.head {
            HeadKind::Softmax => heads::argmax_decode(z_val),
            HeadKind::CrfScalar | HeadKind::CrfBilinear => {
                let a = transitions.expect("crf decoding needs transitions");
                heads::viterbi(z_val, a).0
            }
        }
    }
}
