//! Multi-domain machinery: union output spaces across source domains,
//! per-domain masking during pretraining, and parameter transfer into a
//! target domain.
//!
//! Zero-shot evaluation (no fine-tuning) restricts the pretrained model
//! to the target tags it can actually score: OneHot can only reach tags
//! seen in the source union, while knowledge strategies reach any tag
//! whose atoms, description, or exemplars are covered. Fine-tuning
//! instead goes through [`transfer_parameters`], which copies shared
//! rows and re-initializes the rest.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DomainKnowledge, TagLabel, Vocabulary};
use crate::error::{Error, Result};
use crate::labelspace::{build_mask, MaskMode, MaskVector, Strategy};
use crate::model::{FrozenInputs, HeadKind, Model, ModelConfig, OutputSpace, ParamStore};
use crate::numerics::Tensor;

/// Union output space over a set of source domains.
#[derive(Clone, Debug)]
pub struct UnionSpace {
    pub mode: MaskMode,
    /// Union tag set in lexicographic render order (always present; the
    /// scalar CRF transition axis ranges over tags for every strategy).
    pub tags: Vec<TagLabel>,
    /// Union atoms (atomic strategy) in lexicographic order.
    pub atoms: Vec<String>,
    /// Per-domain masks over the union coordinates.
    pub masks: IndexMap<String, MaskVector>,
    /// For every coordinate, the domains that use it.
    pub provenance: Vec<Vec<String>>,
}

impl UnionSpace {
    pub fn coords(&self) -> Vec<String> {
        match self.mode {
            MaskMode::Tags => self.tags.iter().map(|t| t.to_string()).collect(),
            MaskMode::Atoms => {
                let mut coords: Vec<String> = ["B", "I", "O"].iter().map(|s| s.to_string()).collect();
                coords.extend(self.atoms.iter().cloned());
                coords
            }
        }
    }
}

/// Union the label (or atom) spaces of the given domains; coordinates are
/// ordered lexicographically and each domain gets a mask over them.
pub fn build_union(domains: &[&DomainKnowledge], strategy: Strategy) -> Result<UnionSpace> {
    if domains.is_empty() {
        return Err(Error::LabelSpace("union of zero domains".into()));
    }
    let mut seen = BTreeSet::new();
    for d in domains {
        if !seen.insert(d.domain.clone()) {
            return Err(Error::LabelSpace(format!("duplicate domain id `{}`", d.domain)));
        }
    }

    // Only the atomic strategy masks shared emission coordinates; the
    // description/exemplar strategies restrict output naturally through
    // each batch's own B_d, so their masks range over tags like OneHot.
    let mode = if strategy == Strategy::AtomicConcept {
        MaskMode::Atoms
    } else {
        MaskMode::Tags
    };

    let tag_set: BTreeSet<String> = domains
        .iter()
        .flat_map(|d| d.tag_set().into_iter().map(|t| t.to_string()))
        .collect();
    let tags: Vec<TagLabel> = tag_set
        .into_iter()
        .map(|s| TagLabel::parse(&s))
        .collect::<Result<_>>()?;
    let atoms: Vec<String> = match mode {
        MaskMode::Tags => Vec::new(),
        MaskMode::Atoms => domains
            .iter()
            .flat_map(|d| d.atom_set())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };

    let union = UnionSpace {
        mode,
        tags,
        atoms,
        masks: IndexMap::new(),
        provenance: Vec::new(),
    };
    let coords = union.coords();

    let mut masks = IndexMap::new();
    for d in domains {
        masks.insert(d.domain.clone(), build_mask(d, &coords, mode)?);
    }
    let provenance: Vec<Vec<String>> = (0..coords.len())
        .map(|i| {
            masks
                .iter()
                .filter(|(_, m)| !m.masked[i])
                .map(|(name, _)| name.clone())
                .collect()
        })
        .collect();

    Ok(UnionSpace { masks, provenance, ..union })
}

/// The model output space for training over a union.
pub fn union_output_space(union: &UnionSpace, strategy: Strategy, k: Option<usize>) -> OutputSpace {
    match (union.mode, strategy) {
        (MaskMode::Tags, _) => OutputSpace::Tags { tags: union.tags.clone() },
        (MaskMode::Atoms, Strategy::AtomicConcept) => OutputSpace::Atoms { atoms: union.atoms.clone() },
        (MaskMode::Atoms, _) => OutputSpace::Encoded { k: k.expect("encoded K") },
    }
}

/// Initialize a target-domain model from a pretrained source model for
/// fine-tuning (Eqs for partial copying of the output and transition
/// matrices; encoder and input embeddings are retained whole).
pub fn transfer_parameters(
    src: &Model,
    target: &DomainKnowledge,
    seed: u64,
    init_range: f64,
) -> Result<Model> {
    if src.cfg.strategy != Strategy::OneHot && src.cfg.strategy != Strategy::AtomicConcept {
        // C, encoders, and W_a are domain independent: share everything
        let mut model = src.clone();
        if src.cfg.head == HeadKind::CrfScalar {
            return transfer_scalar_tags(model, src, target, seed, init_range);
        }
        model.scalar_tags = src.scalar_tags.clone();
        return Ok(model);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    // encoder and input embeddings are retained
    for (name, tensor) in src.params.iter() {
        if name.starts_with("embed.") || name.starts_with("enc.") || name.starts_with("desc.") {
            params.insert(name.clone(), tensor.clone());
        }
    }

    let space = match (&src.cfg.strategy, &src.space) {
        (Strategy::OneHot, OutputSpace::Tags { tags: src_tags }) => {
            let target_tags = target.tag_set();
            let src_w = src.params.get("out.w_o");
            let mut w = Tensor::uniform(target_tags.len(), src_w.cols(), init_range, &mut rng);
            for (row, tag) in target_tags.iter().enumerate() {
                if let Some(src_row) = src_tags.iter().position(|t| t == tag) {
                    w.row_mut(row).copy_from_slice(src_w.row(src_row));
                }
            }
            params.insert("out.w_o", w);
            OutputSpace::Tags { tags: target_tags }
        }
        (Strategy::AtomicConcept, OutputSpace::Atoms { atoms: src_atoms }) => {
            let target_atoms: Vec<String> = target.atom_set().into_iter().collect();
            let src_c = src.params.get("out.proj_c");
            let mut c = Tensor::uniform(3 + target_atoms.len(), src_c.cols(), init_range, &mut rng);
            // IOB rows are always shared
            for r in 0..3 {
                c.row_mut(r).copy_from_slice(src_c.row(r));
            }
            for (i, atom) in target_atoms.iter().enumerate() {
                if let Some(j) = src_atoms.iter().position(|a| a == atom) {
                    c.row_mut(3 + i).copy_from_slice(src_c.row(3 + j));
                }
            }
            params.insert("out.proj_c", c);
            OutputSpace::Atoms { atoms: target_atoms }
        }
        _ => unreachable!("strategy/space checked above"),
    };

    let mut scalar_tags = None;
    match src.cfg.head {
        HeadKind::Softmax => {}
        HeadKind::CrfScalar => {
            let src_axis = src
                .scalar_tags
                .as_ref()
                .ok_or_else(|| Error::Config("source model lacks scalar tags".into()))?;
            let target_tags = target.tag_set();
            let src_a = src.params.get("trans.a");
            let mut a = Tensor::uniform(target_tags.len() + 1, target_tags.len(), init_range, &mut rng);
            let src_pos: Vec<Option<usize>> = target_tags
                .iter()
                .map(|t| src_axis.iter().position(|s| s == t))
                .collect();
            for (j, pj) in src_pos.iter().enumerate() {
                let Some(sj) = pj else { continue };
                // entries are copied only when both endpoints are shared;
                // the start row transfers along with any shared tag
                a.set(target_tags.len(), j, src_a.get(src_axis.len(), *sj));
                for (k2, pk) in src_pos.iter().enumerate() {
                    if let Some(sk) = pk {
                        a.set(k2, j, src_a.get(*sk, *sj));
                    }
                }
            }
            params.insert("trans.a", a);
            scalar_tags = Some(target_tags);
        }
        HeadKind::CrfBilinear => {
            // W_a and the start embedding are domain independent
            params.insert("trans.w_a", src.params.get("trans.w_a").clone());
            params.insert("trans.start", src.params.get("trans.start").clone());
        }
    }

    Ok(Model::from_parts(
        src.cfg.clone(),
        src.vocab.clone(),
        params,
        space,
        scalar_tags,
        src.frozen.clone(),
    ))
}

/// Scalar-transition transfer for the knowledge strategies (the rest of
/// the model is shared whole).
fn transfer_scalar_tags(
    mut model: Model,
    src: &Model,
    target: &DomainKnowledge,
    seed: u64,
    init_range: f64,
) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src_axis = src
        .scalar_tags
        .as_ref()
        .ok_or_else(|| Error::Config("source model lacks scalar tags".into()))?;
    let target_tags = target.tag_set();
    let src_a = src.params.get("trans.a");
    let mut a = Tensor::uniform(target_tags.len() + 1, target_tags.len(), init_range, &mut rng);
    for (j, tag_j) in target_tags.iter().enumerate() {
        let Some(sj) = src_axis.iter().position(|t| t == tag_j) else { continue };
        a.set(target_tags.len(), j, src_a.get(src_axis.len(), sj));
        for (k2, tag_k) in target_tags.iter().enumerate() {
            if let Some(sk) = src_axis.iter().position(|t| t == tag_k) {
                a.set(k2, j, src_a.get(sk, sj));
            }
        }
    }
    model.params.set("trans.a", a);
    model.scalar_tags = Some(target_tags);
    Ok(model)
}

/// Fresh source-union model for pretraining. The scalar CRF transition
/// axis is the union tag set for every strategy.
#[allow(clippy::too_many_arguments)]
pub fn init_union_model(
    cfg: ModelConfig,
    vocab: Vocabulary,
    union: &UnionSpace,
    encoded_k: Option<usize>,
    frozen: FrozenInputs,
    init_range: f64,
    seed: u64,
    pretrained: Option<&crate::corpus::WordEmbeddings>,
) -> Result<Model> {
    let space = union_output_space(union, cfg.strategy, encoded_k);
    let scalar_tags = (cfg.head == HeadKind::CrfScalar).then(|| union.tags.clone());
    Model::init(cfg, vocab, space, scalar_tags, frozen, init_range, seed, pretrained)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(json: &str) -> DomainKnowledge {
        DomainKnowledge::parse(json, "t").unwrap()
    }

    #[test]
    fn union_tags_lexicographic() {
        let a = k(r#"{"domain":"a","slots":{"a":{}}}"#);
        let b = k(r#"{"domain":"b","slots":{"b":{}}}"#);
        let union = build_union(&[&a, &b], Strategy::OneHot).unwrap();
        let rendered: Vec<String> = union.tags.iter().map(|t| t.to_string()).collect();
        assert_eq!(rendered, vec!["B-a", "B-b", "I-a", "I-b", "O"]);
        assert_eq!(union.masks["a"].masked, vec![false, true, false, true, false]);
    }

    #[test]
    fn union_atoms_with_new_target_atoms() {
        // a DSTC2/DSTC3-style layout: the second domain introduces new atoms
        let d2 = k(r#"{"domain":"d2","slots":{
            "food":{"atoms":["food_kind"]},
            "area":{"atoms":["area_name"]}
        }}"#);
        let d3 = k(r#"{"domain":"d3","slots":{
            "food":{"atoms":["food_kind"]},
            "childrenallowed":{"atoms":["children","allowed"]}
        }}"#);
        let union = build_union(&[&d2, &d3], Strategy::AtomicConcept).unwrap();
        assert_eq!(union.atoms, vec!["allowed", "area_name", "children", "food_kind"]);
        // d2 unmasks IOB + its own atoms only
        let d2_mask = &union.masks["d2"];
        assert_eq!(d2_mask.masked, vec![false, false, false, true, false, true, false]);
        // provenance: food_kind used by both
        let coords = union.coords();
        let fk = coords.iter().position(|c| c == "food_kind").unwrap();
        assert_eq!(union.provenance[fk], vec!["d2".to_string(), "d3".to_string()]);
    }

    #[test]
    fn union_single_domain_all_unmasked() {
        let a = k(r#"{"domain":"a","slots":{"x":{}}}"#);
        let union = build_union(&[&a], Strategy::OneHot).unwrap();
        assert!(union.masks["a"].masked.iter().all(|&m| !m));
    }

    #[test]
    fn union_duplicate_domain_errors() {
        let a = k(r#"{"domain":"a","slots":{"x":{}}}"#);
        assert!(build_union(&[&a, &a], Strategy::OneHot).is_err());
    }
}
