//! Optimization loop, checkpoint selection, and the sweep harness.

mod config;
mod optim;
mod sweep;

pub use config::TrainConfig;
pub use optim::{adam_step, clip_global_norm, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use sweep::{sweep, SweepAxis, SweepReport, SweepRow};

use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{build_union, init_union_model, transfer_parameters};
use crate::corpus::{
    build_vocab, split_train_valid, CtxVectors, DomainKnowledge, Sentence, TagLabel, WordEmbeddings,
};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::eval::{conll_f1, EvalMetrics};
use crate::labelspace::Strategy;
use crate::model::{BoundModel, FrozenInputs, Model, OutputSpace, ViewOptions};
use crate::numerics::Tape;

/// External files feeding a training run.
#[derive(Clone, Copy, Default)]
pub struct Resources<'a> {
    /// Word embeddings: initialize the input table (when enabled) and
    /// serve as the frozen exemplar table W_e.
    pub word_embeddings: Option<&'a WordEmbeddings>,
    pub ctx_vectors: Option<&'a CtxVectors>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f1: f64,
}

/// Learning curve plus best-checkpoint bookkeeping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_f1: f64,
    pub checkpoint_id: String,
    pub ms_per_batch: f64,
}

impl TrainReport {
    /// Plain-text learning-curve table (one row per epoch).
    pub fn curve_table(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tvalid_f1\n");
        for rec in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.4}\n",
                rec.epoch, rec.train_loss, rec.valid_f1
            ));
        }
        out
    }
}

fn knowledge_for<'k>(
    knowledges: &[&'k DomainKnowledge],
    domain: &str,
) -> Result<&'k DomainKnowledge> {
    knowledges
        .iter()
        .find(|k| k.domain == domain)
        .copied()
        .ok_or_else(|| Error::Training(format!("no knowledge file for domain `{domain}`")))
}

/// Decode `data` with the model, preserving sentence order across domains.
pub fn predict_all(
    model: &Model,
    data: &[Sentence],
    knowledges: &[&DomainKnowledge],
    opts: &ViewOptions,
) -> Result<Vec<Vec<TagLabel>>> {
    let mut out: Vec<Option<Vec<TagLabel>>> = vec![None; data.len()];
    let mut domains: Vec<&str> = data.iter().map(|s| s.domain.as_str()).collect();
    domains.sort_unstable();
    domains.dedup();
    for domain in domains {
        let knowledge = knowledge_for(knowledges, domain)?;
        let view = model.domain_view(knowledge, opts)?;
        let transitions = model.transitions_values(&view);
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, model);
        let domain_nodes = bound.bind_domain(&mut tape, &view)?;
        for (i, sentence) in data.iter().enumerate() {
            if sentence.domain != domain {
                continue;
            }
            let indices = bound.decode_tokens(
                &mut tape,
                &domain_nodes,
                &sentence.tokens,
                transitions.as_ref(),
            );
            out[i] = Some(indices.into_iter().map(|ix| view.tags[ix].clone()).collect());
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every sentence decoded")).collect())
}

/// Decode and score in one call.
pub fn evaluate(
    model: &Model,
    data: &[Sentence],
    knowledges: &[&DomainKnowledge],
    opts: &ViewOptions,
) -> Result<(EvalMetrics, Vec<Vec<TagLabel>>)> {
    let pred = predict_all(model, data, knowledges, opts)?;
    let metrics = conll_f1(data, &pred)?;
    Ok((metrics, pred))
}

/// Train `model` on `train`, validating after every epoch and returning
/// the parameters with the best validation F1.
pub fn fit(
    cfg: &TrainConfig,
    mut model: Model,
    train: &[Sentence],
    valid: &[Sentence],
    knowledges: &[&DomainKnowledge],
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if valid.is_empty() {
        return Err(Error::Training("empty validation set".into()));
    }

    let view_opts = ViewOptions {
        zero_shot: false,
        exemplar_cap: cfg.exemplars_per_slot,
    };

    // domain-homogeneous batches by construction
    let mut by_domain: IndexMap<&str, Vec<&Sentence>> = IndexMap::new();
    for s in train {
        by_domain.entry(s.domain.as_str()).or_default().push(s);
    }
    let mut views = IndexMap::new();
    for domain in by_domain.keys() {
        let knowledge = knowledge_for(knowledges, domain)?;
        views.insert(*domain, model.domain_view(knowledge, &view_opts)?);
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_3df3_9f6a_1b20);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x8c4f_22e1_55aa_0fd7);

    let mut adam = AdamState::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut epochs_out = Vec::with_capacity(cfg.epochs);
    let mut batch_count = 0usize;
    let mut batch_time_ms = 0.0f64;

    for epoch in 1..=cfg.epochs {
        // rebuild description views so fixed B snapshots track the encoder
        let mut batches: Vec<(&str, Vec<&Sentence>)> = Vec::new();
        for (domain, sentences) in by_domain.iter_mut() {
            sentences.shuffle(&mut shuffle_rng);
            for chunk in sentences.chunks(cfg.batch_size_for(domain)) {
                batches.push((domain, chunk.to_vec()));
            }
        }
        batches.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_sentences = 0usize;
        for (domain, batch) in &batches {
            let started = Instant::now();
            let view = &views[domain];
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &model);
            let domain_nodes = bound.bind_domain(&mut tape, view)?;

            let mut losses = Vec::with_capacity(batch.len());
            for sentence in batch {
                losses.push(bound.sentence_nll(
                    &mut tape,
                    &domain_nodes,
                    view,
                    sentence,
                    Mode::Train,
                    &mut dropout_rng,
                )?);
            }
            let total = losses
                .into_iter()
                .reduce(|a, b| tape.add(a, b))
                .expect("non-empty batch");
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged to {loss_value} at epoch {epoch} on a `{domain}` batch; \
                     try a smaller learning rate"
                )));
            }
            epoch_loss += loss_value * batch.len() as f64;
            epoch_sentences += batch.len();

            let grads_by_node = tape.backward(loss)?;
            let mut grads: IndexMap<String, crate::numerics::Tensor> = IndexMap::new();
            for (name, &node) in bound.nodes() {
                if name == "embed.w_in" && !model.cfg.train_input_embeddings {
                    continue;
                }
                grads.insert(name.clone(), grads_by_node.get(node));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam_step(&mut model.params, &grads, &mut adam, cfg.lr, cfg.weight_decay);
            batch_time_ms += started.elapsed().as_secs_f64() * 1e3;
            batch_count += 1;
        }

        // description label matrices depend on the updated encoder; the
        // views used for evaluation must be rebuilt against new params
        if model.cfg.strategy.is_desc() {
            for (domain, view) in views.iter_mut() {
                let knowledge = knowledge_for(knowledges, domain)?;
                *view = model.domain_view(knowledge, &view_opts)?;
            }
        }

        let (metrics, _) = evaluate(&model, valid, knowledges, &view_opts)?;
        let train_loss = epoch_loss / epoch_sentences as f64;
        epochs_out.push(EpochRecord {
            epoch,
            train_loss,
            valid_f1: metrics.f1,
        });
        let improved = best.as_ref().map_or(true, |(f1, _, _)| metrics.f1 > *f1);
        if improved {
            best = Some((metrics.f1, epoch, model.clone()));
        }
    }

    let (best_valid_f1, best_epoch, best_model) = best.expect("at least one epoch ran");
    let report = TrainReport {
        epochs: epochs_out,
        best_epoch,
        best_valid_f1,
        checkpoint_id: format!("seed{}-epoch{}", cfg.seed, best_epoch),
        ms_per_batch: batch_time_ms / batch_count.max(1) as f64,
    };
    Ok((best_model, report))
}

/// Where the embedding length K of the encoded strategies comes from.
pub fn encoded_k(cfg: &TrainConfig, resources: &Resources) -> Result<Option<usize>> {
    Ok(Some(match cfg.strategy {
        Strategy::DescMean => 3 + cfg.embed_dim,
        Strategy::DescBlstm => 3 + 2 * cfg.desc_hidden,
        Strategy::DescCnn => 3 + cfg.cnn_channels,
        Strategy::ExemplarWordEmb => {
            let we = resources.word_embeddings.ok_or_else(|| {
                Error::Config("ex-wordemb strategy requires an embedding file".into())
            })?;
            3 + 3 * we.dim()
        }
        Strategy::ExemplarContextual => {
            return Err(Error::Config(
                "contextual exemplar K must be probed from the vectors".into(),
            ))
        }
        _ => return Ok(None),
    }))
}

fn encoded_k_for(
    cfg: &TrainConfig,
    resources: &Resources,
    knowledges: &[&DomainKnowledge],
) -> Result<Option<usize>> {
    if cfg.strategy == Strategy::ExemplarContextual {
        let ctx = resources.ctx_vectors.ok_or_else(|| {
            Error::Config("ex-ctx strategy requires a contextual-vector file".into())
        })?;
        for k in knowledges {
            for slot in k.slots.keys() {
                if let Some((f, b)) = ctx.get(&k.domain, slot, 0) {
                    return Ok(Some(3 + f.cols() + b.cols()));
                }
            }
        }
        return Err(Error::Config(
            "contextual-vector file has no entry for any slot of the training domains".into(),
        ));
    }
    encoded_k(cfg, resources)
}

fn vocab_extra_tokens(cfg: &TrainConfig, knowledges: &[&DomainKnowledge]) -> Vec<String> {
    if cfg.strategy.is_desc() {
        knowledges
            .iter()
            .flat_map(|k| k.description_tokens())
            .collect()
    } else {
        Vec::new()
    }
}

fn frozen_inputs(cfg: &TrainConfig, resources: &Resources) -> FrozenInputs {
    FrozenInputs {
        word_embeddings: if cfg.strategy == Strategy::ExemplarWordEmb {
            resources.word_embeddings.cloned()
        } else {
            None
        },
        ctx_vectors: if cfg.strategy == Strategy::ExemplarContextual {
            resources.ctx_vectors.cloned()
        } else {
            None
        },
    }
}

fn output_space_for(
    cfg: &TrainConfig,
    knowledge: &DomainKnowledge,
    k: Option<usize>,
) -> Result<OutputSpace> {
    Ok(match cfg.strategy {
        Strategy::OneHot => OutputSpace::Tags { tags: knowledge.tag_set() },
        Strategy::AtomicConcept => OutputSpace::Atoms {
            atoms: knowledge.atom_set().into_iter().collect(),
        },
        _ => OutputSpace::Encoded {
            k: k.ok_or_else(|| Error::Config("missing embedding length K".into()))?,
        },
    })
}

/// Single-domain training. When `valid` is `None` the training data is
/// split `train_ratio` / rest.
pub fn train(
    cfg: &TrainConfig,
    data: &[Sentence],
    valid: Option<&[Sentence]>,
    knowledge: &DomainKnowledge,
    resources: &Resources,
) -> Result<(Model, TrainReport)> {
    let (train_owned, valid_owned);
    let (train_set, valid_set): (&[Sentence], &[Sentence]) = match valid {
        Some(v) => (data, v),
        None => {
            let (t, v) = split_train_valid(data, cfg.train_ratio, cfg.seed ^ 0x77aa)?;
            train_owned = t;
            valid_owned = v;
            (&train_owned, &valid_owned)
        }
    };

    let knowledges = [knowledge];
    let extra = vocab_extra_tokens(cfg, &knowledges);
    let vocab = build_vocab(train_set, &extra, cfg.min_count)?;
    let k = encoded_k_for(cfg, resources, &knowledges)?;
    let space = output_space_for(cfg, knowledge, k)?;
    let scalar_tags =
        (cfg.head == crate::model::HeadKind::CrfScalar).then(|| knowledge.tag_set());
    let pretrained = cfg
        .use_pretrained_embeddings
        .then_some(resources.word_embeddings)
        .flatten();
    let model = Model::init(
        cfg.model_config(),
        vocab,
        space,
        scalar_tags,
        frozen_inputs(cfg, resources),
        cfg.init_range,
        cfg.seed,
        pretrained,
    )?;
    fit(cfg, model, train_set, valid_set, &knowledges)
}

/// Masked multi-domain pretraining over the union output space. Each
/// element of `sources` is one domain's corpus and knowledge.
pub fn pretrain(
    cfg: &TrainConfig,
    sources: &[(Vec<Sentence>, &DomainKnowledge)],
    resources: &Resources,
) -> Result<(Model, TrainReport)> {
    if sources.is_empty() {
        return Err(Error::Training("pretraining needs at least one source domain".into()));
    }
    let knowledges: Vec<&DomainKnowledge> = sources.iter().map(|(_, k)| *k).collect();
    let union = build_union(&knowledges, cfg.strategy)?;

    let mut train_set: Vec<Sentence> = Vec::new();
    let mut valid_set: Vec<Sentence> = Vec::new();
    for (idx, (data, _)) in sources.iter().enumerate() {
        if data.len() < 2 {
            train_set.extend(data.iter().cloned());
            valid_set.extend(data.iter().cloned());
            continue;
        }
        let (t, v) = split_train_valid(data, cfg.train_ratio, cfg.seed ^ (0x66bb + idx as u64))?;
        train_set.extend(t);
        valid_set.extend(v);
    }

    let extra = vocab_extra_tokens(cfg, &knowledges);
    let vocab = build_vocab(&train_set, &extra, cfg.min_count)?;
    let k = encoded_k_for(cfg, resources, &knowledges)?;
    let pretrained = cfg
        .use_pretrained_embeddings
        .then_some(resources.word_embeddings)
        .flatten();
    let model = init_union_model(
        cfg.model_config(),
        vocab,
        &union,
        k,
        frozen_inputs(cfg, resources),
        cfg.init_range,
        cfg.seed,
        pretrained,
    )?;
    fit(cfg, model, &train_set, &valid_set, &knowledges)
}

/// Transfer a pretrained source model into the target domain and
/// fine-tune it on target data.
pub fn finetune(
    cfg: &TrainConfig,
    source: &Model,
    data: &[Sentence],
    valid: Option<&[Sentence]>,
    knowledge: &DomainKnowledge,
) -> Result<(Model, TrainReport)> {
    let model = transfer_parameters(source, knowledge, cfg.seed, cfg.init_range)?;
    let (train_owned, valid_owned);
    let (train_set, valid_set): (&[Sentence], &[Sentence]) = match valid {
        Some(v) => (data, v),
        None => match split_train_valid(data, cfg.train_ratio, cfg.seed ^ 0x77aa) {
            Ok((t, v)) => {
                train_owned = t;
                valid_owned = v;
                (&train_owned, &valid_owned)
            }
            // too little data to split: validate on the training set
            Err(_) => (data, data),
        },
    };
    fit(cfg, model, train_set, valid_set, &[knowledge])
}
