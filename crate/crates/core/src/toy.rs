//! Synthetic two-source-domain adaptation task.
//!
//! The source domains are `travel` (from_city, to_city, date) and
//! `person` (date_of_birth, country_of_birth, citizenship); the target
//! domain `biography` tags only slots that are new combinations of the
//! source atoms (city_of_birth, from_country, to_country, arrival_date),
//! so a one-hot model can never reach a target tag zero-shot while the
//! knowledge strategies can. Everything (corpora, knowledge, synthetic
//! embeddings, contextual vectors) is generated deterministically from
//! one seed.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    write_corpus, CtxVectors, DomainKnowledge, Exemplar, Sentence, SlotKnowledge, TagLabel,
    WordEmbeddings,
};
use crate::error::Result;
use crate::numerics::Tensor;

const CITIES: &[&str] = &[
    "boston",
    "denver",
    "austin",
    "seattle",
    "chicago",
    "miami",
    "portland",
    "atlanta",
    "dallas",
    "tucson",
    "new york",
    "los angeles",
    "san jose",
    "santa fe",
    "el paso",
];

const COUNTRIES: &[&str] = &[
    "canada",
    "france",
    "japan",
    "brazil",
    "norway",
    "egypt",
    "peru",
    "kenya",
    "spain",
    "chile",
    "costa rica",
    "new zealand",
    "south africa",
    "sri lanka",
];

const DATES: &[&str] = &[
    "monday",
    "tuesday",
    "friday",
    "sunday",
    "tomorrow",
    "today",
    "january five",
    "march twelve",
    "july nine",
    "april two",
    "june twenty one",
    "may eleven",
];

const TRAVEL_TEMPLATES: &[&str] = &[
    "book a flight from {from_city:CITY} to {to_city:CITY} on {date:DATE}",
    "find flights from {from_city:CITY} to {to_city:CITY}",
    "i want to fly to {to_city:CITY} on {date:DATE}",
    "departing from {from_city:CITY} on {date:DATE} please",
    "show me trips to {to_city:CITY}",
    "travel from {from_city:CITY} to {to_city:CITY}",
    "arriving in {to_city:CITY} on {date:DATE}",
    "leaving from {from_city:CITY} on {date:DATE}",
    "flights to {to_city:CITY} please",
    "i need a flight from {from_city:CITY}",
];

const PERSON_TEMPLATES: &[&str] = &[
    "she was born on {date_of_birth:DATE}",
    "he was born in {country_of_birth:COUNTRY}",
    "the author was born in {country_of_birth:COUNTRY} on {date_of_birth:DATE}",
    "she is a citizen of {citizenship:COUNTRY}",
    "he holds {citizenship:COUNTRY} citizenship",
    "a citizen of {citizenship:COUNTRY} born on {date_of_birth:DATE}",
    "they were born in {country_of_birth:COUNTRY}",
    "he is a citizen of {citizenship:COUNTRY}",
];

const BIOGRAPHY_TEMPLATES: &[&str] = &[
    "she was born in {city_of_birth:CITY}",
    "the author was born in {city_of_birth:CITY}",
    "they travel from {from_country:COUNTRY} to {to_country:COUNTRY}",
    "flights from {from_country:COUNTRY} to {to_country:COUNTRY} arriving on {arrival_date:DATE}",
    "i want to fly to {to_country:COUNTRY} arriving on {arrival_date:DATE}",
    "a flight from {from_country:COUNTRY} arriving on {arrival_date:DATE} please",
    "he was born in {city_of_birth:CITY}",
    "show me trips to {to_country:COUNTRY}",
    "born in {city_of_birth:CITY}",
    "leaving on {depart_date:DATE} from {from_country:COUNTRY}",
    "departing on {depart_date:DATE} to {to_country:COUNTRY}",
    "he is in {home_city:CITY}",
    "she is in {home_city:CITY}",
    "trips from {from_country:COUNTRY} leaving on {depart_date:DATE}",
    "the author is in {home_city:CITY}",
];

fn lexicon(name: &str) -> &'static [&'static str] {
    match name {
        "CITY" => CITIES,
        "COUNTRY" => COUNTRIES,
        "DATE" => DATES,
        other => panic!("unknown lexicon {other}"),
    }
}

/// Generation knobs; the defaults are the committed task.
#[derive(Clone, Copy, Debug)]
pub struct ToySpec {
    pub seed: u64,
    /// Sentences per source domain.
    pub source_sentences: usize,
    pub target_train: usize,
    pub target_test: usize,
    /// Exemplars generated per slot in each knowledge file.
    pub exemplars_per_slot: usize,
    pub embed_dim: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            seed: 7,
            source_sentences: 160,
            target_train: 300,
            target_test: 120,
            exemplars_per_slot: 10,
            embed_dim: 16,
        }
    }
}

/// The generated task.
pub struct ToyData {
    pub travel: Vec<Sentence>,
    pub person: Vec<Sentence>,
    pub target_train: Vec<Sentence>,
    pub target_test: Vec<Sentence>,
    pub travel_knowledge: DomainKnowledge,
    pub person_knowledge: DomainKnowledge,
    pub target_knowledge: DomainKnowledge,
    pub embeddings: WordEmbeddings,
    pub ctx_vectors: CtxVectors,
}

fn fill_template(template: &str, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<TagLabel>) {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for part in template.split_whitespace() {
        if let Some(spec) = part.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            let (slot, lex_name) = spec.split_once(':').expect("slot:LEXICON");
            let value = lexicon(lex_name).choose(rng).expect("non-empty lexicon");
            for (i, w) in value.split_whitespace().enumerate() {
                tokens.push(w.to_string());
                tags.push(if i == 0 {
                    TagLabel::Begin(slot.to_string())
                } else {
                    TagLabel::Inside(slot.to_string())
                });
            }
        } else {
            tokens.push(part.to_string());
            tags.push(TagLabel::Outside);
        }
    }
    (tokens, tags)
}

fn generate_corpus(
    templates: &[&str],
    domain: &str,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sentence> {
    (0..count)
        .map(|_| {
            let template = templates.choose(rng).expect("templates");
            let (tokens, tags) = fill_template(template, rng);
            Sentence::new(tokens, tags, domain).expect("template sentences are valid")
        })
        .collect()
}

fn slot_atoms(slot: &str) -> &'static [&'static str] {
    match slot {
        "from_city" => &["city_name", "from_location"],
        "to_city" => &["city_name", "to_location"],
        "date" => &["date_value"],
        "date_of_birth" => &["date_value", "birth"],
        "country_of_birth" => &["country_name", "birth"],
        "citizenship" => &["country_name"],
        "city_of_birth" => &["city_name", "birth"],
        "from_country" => &["country_name", "from_location"],
        "to_country" => &["country_name", "to_location"],
        "arrival_date" => &["date_value", "to_location"],
        "depart_date" => &["date_value", "from_location"],
        "home_city" => &["city_name"],
        other => panic!("unknown slot {other}"),
    }
}

fn slot_description(slot: &str) -> Vec<String> {
    // tokenized slot names, like the datasets' own descriptions
    slot.split('_').map(|w| w.to_string()).collect()
}

/// Generate exemplars for `slot`: sample grammar sentences containing it
/// and mark the first occurrence span (1-based inclusive).
fn generate_exemplars(
    templates: &[&str],
    slot: &str,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Exemplar> {
    let mut out = Vec::with_capacity(count);
    let candidates: Vec<&&str> = templates
        .iter()
        .filter(|t| t.contains(&format!("{{{slot}:")))
        .collect();
    assert!(!candidates.is_empty(), "no template mentions slot {slot}");
    while out.len() < count {
        let template = candidates.choose(rng).expect("candidates");
        let (tokens, tags) = fill_template(template, rng);
        let begin = TagLabel::Begin(slot.to_string());
        let inside = TagLabel::Inside(slot.to_string());
        let Some(sp0) = tags.iter().position(|t| t == &begin) else { continue };
        let mut ep0 = sp0;
        while ep0 + 1 < tags.len() && tags[ep0 + 1] == inside {
            ep0 += 1;
        }
        out.push(Exemplar { tokens, sp: sp0 + 1, ep: ep0 + 1 });
    }
    out
}

fn build_knowledge(
    domain: &str,
    slots: &[&str],
    templates: &[&str],
    exemplars_per_slot: usize,
    rng: &mut ChaCha8Rng,
) -> DomainKnowledge {
    let mut slot_map = std::collections::BTreeMap::new();
    for slot in slots {
        slot_map.insert(
            slot.to_string(),
            SlotKnowledge {
                atoms: slot_atoms(slot).iter().map(|a| a.to_string()).collect(),
                description: slot_description(slot),
                exemplars: generate_exemplars(templates, slot, exemplars_per_slot, rng),
            },
        );
    }
    DomainKnowledge { domain: domain.to_string(), slots: slot_map }
}

fn unit_vec(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Synthetic class-structured word embeddings: members of a value class
/// cluster around a shared centroid; all other words are independent.
fn build_embeddings(spec: &ToySpec, words: &BTreeSet<String>, rng: &mut ChaCha8Rng) -> WordEmbeddings {
    let dim = spec.embed_dim;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        unit_vec((0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
    };
    let city_c = draw(rng);
    let country_c = draw(rng);
    let date_c = draw(rng);

    let class_of = |word: &str| -> Option<&Vec<f64>> {
        let in_lex = |lex: &[&str]| lex.iter().any(|v| v.split_whitespace().any(|w| w == word));
        if in_lex(CITIES) {
            Some(&city_c)
        } else if in_lex(COUNTRIES) {
            Some(&country_c)
        } else if in_lex(DATES) {
            Some(&date_c)
        } else {
            None
        }
    };

    let mut emb = WordEmbeddings::new(dim);
    for word in words {
        let noise: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.45..=0.45)).collect();
        let vec = match class_of(word) {
            Some(centroid) => {
                unit_vec(centroid.iter().zip(&noise).map(|(c, n)| c + n).collect())
            }
            None => unit_vec(noise),
        };
        emb.insert(word.clone(), vec);
    }
    emb
}

/// Deterministic stand-in for a pretrained bidirectional LM: position
/// vectors are decayed sums of word embeddings up to (forward) or from
/// (backward) the position, unit-normalized.
fn contextual_rows(tokens: &[String], emb: &WordEmbeddings) -> (Tensor, Tensor) {
    let dim = emb.dim();
    let decay = 0.55;
    let get = |w: &String| -> Vec<f64> {
        emb.get(w).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; dim])
    };
    let mut fwd_rows = Vec::with_capacity(tokens.len());
    let mut acc = vec![0.0; dim];
    for w in tokens {
        let e = get(w);
        for (a, x) in acc.iter_mut().zip(&e) {
            *a = *a * decay + x;
        }
        fwd_rows.push(unit_vec(acc.clone()));
    }
    let mut bwd_rows = vec![Vec::new(); tokens.len()];
    let mut acc = vec![0.0; dim];
    for (i, w) in tokens.iter().enumerate().rev() {
        let e = get(w);
        for (a, x) in acc.iter_mut().zip(&e) {
            *a = *a * decay + x;
        }
        bwd_rows[i] = unit_vec(acc.clone());
    }
    (Tensor::from_rows(&fwd_rows), Tensor::from_rows(&bwd_rows))
}

fn build_ctx_vectors(knowledges: &[&DomainKnowledge], emb: &WordEmbeddings) -> CtxVectors {
    let mut ctx = CtxVectors::default();
    for k in knowledges {
        for (slot, sk) in &k.slots {
            for (i, ex) in sk.exemplars.iter().enumerate() {
                let (fwd, bwd) = contextual_rows(&ex.tokens, emb);
                ctx.insert(&k.domain, slot, i, fwd, bwd);
            }
        }
    }
    ctx
}

/// Generate the full task.
pub fn generate(spec: &ToySpec) -> ToyData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let travel = generate_corpus(TRAVEL_TEMPLATES, "travel", spec.source_sentences, &mut rng);
    let person = generate_corpus(PERSON_TEMPLATES, "person", spec.source_sentences, &mut rng);
    let target_train =
        generate_corpus(BIOGRAPHY_TEMPLATES, "biography", spec.target_train, &mut rng);
    let target_test =
        generate_corpus(BIOGRAPHY_TEMPLATES, "biography", spec.target_test, &mut rng);

    let travel_knowledge = build_knowledge(
        "travel",
        &["from_city", "to_city", "date"],
        TRAVEL_TEMPLATES,
        spec.exemplars_per_slot,
        &mut rng,
    );
    let person_knowledge = build_knowledge(
        "person",
        &["date_of_birth", "country_of_birth", "citizenship"],
        PERSON_TEMPLATES,
        spec.exemplars_per_slot,
        &mut rng,
    );
    let target_knowledge = build_knowledge(
        "biography",
        &[
            "city_of_birth",
            "from_country",
            "to_country",
            "arrival_date",
            "depart_date",
            "home_city",
        ],
        BIOGRAPHY_TEMPLATES,
        spec.exemplars_per_slot,
        &mut rng,
    );

    // every word any template or lexicon can produce, plus description words
    let mut words: BTreeSet<String> = BTreeSet::new();
    for templates in [TRAVEL_TEMPLATES, PERSON_TEMPLATES, BIOGRAPHY_TEMPLATES] {
        for t in templates {
            for part in t.split_whitespace() {
                if !part.starts_with('{') {
                    words.insert(part.to_string());
                }
            }
        }
    }
    for lex in [CITIES, COUNTRIES, DATES] {
        for value in lex {
            for w in value.split_whitespace() {
                words.insert(w.to_string());
            }
        }
    }
    for k in [&travel_knowledge, &person_knowledge, &target_knowledge] {
        for w in k.description_tokens() {
            words.insert(w);
        }
    }
    let embeddings = build_embeddings(spec, &words, &mut rng);
    let ctx_vectors = build_ctx_vectors(
        &[&travel_knowledge, &person_knowledge, &target_knowledge],
        &embeddings,
    );

    ToyData {
        travel,
        person,
        target_train,
        target_test,
        travel_knowledge,
        person_knowledge,
        target_knowledge,
        embeddings,
        ctx_vectors,
    }
}

/// Write the task to a directory in the external file formats.
pub fn write_to_dir(data: &ToyData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_corpus(dir.join("source_travel.tsv"), &data.travel)?;
    write_corpus(dir.join("source_person.tsv"), &data.person)?;
    write_corpus(dir.join("target_train.tsv"), &data.target_train)?;
    write_corpus(dir.join("target_test.tsv"), &data.target_test)?;
    data.travel_knowledge.save(dir.join("travel.knowledge.json"))?;
    data.person_knowledge.save(dir.join("person.knowledge.json"))?;
    data.target_knowledge.save(dir.join("biography.knowledge.json"))?;
    data.embeddings.save(dir.join("embeddings.txt"))?;
    data.ctx_vectors.write(dir.join("ctx_vectors.jsonl"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&ToySpec::default());
        let b = generate(&ToySpec::default());
        assert_eq!(a.travel, b.travel);
        assert_eq!(a.target_test, b.target_test);
        assert_eq!(a.target_knowledge, b.target_knowledge);
    }

    #[test]
    fn target_slots_are_new_combinations_of_source_atoms() {
        let data = generate(&ToySpec::default());
        let source_atoms: BTreeSet<String> = data
            .travel_knowledge
            .atom_set()
            .into_iter()
            .chain(data.person_knowledge.atom_set())
            .collect();
        let source_slots: BTreeSet<&String> = data
            .travel_knowledge
            .slots
            .keys()
            .chain(data.person_knowledge.slots.keys())
            .collect();
        for (slot, sk) in &data.target_knowledge.slots {
            assert!(!source_slots.contains(slot), "target slot {slot} exists in a source");
            for atom in &sk.atoms {
                assert!(source_atoms.contains(atom), "atom {atom} not in sources");
            }
            // genuinely new combination: no source slot has the same atom set
            for src in [&data.travel_knowledge, &data.person_knowledge] {
                for (s, k) in &src.slots {
                    assert_ne!(&sk.atoms, &k.atoms, "target {slot} duplicates source {s}");
                }
            }
        }
    }

    #[test]
    fn target_tokens_are_covered_by_source_vocabulary() {
        let data = generate(&ToySpec::default());
        let source_vocab: BTreeSet<&String> = data
            .travel
            .iter()
            .chain(&data.person)
            .flat_map(|s| s.tokens.iter())
            .collect();
        for s in data.target_train.iter().chain(&data.target_test) {
            for tok in &s.tokens {
                assert!(source_vocab.contains(tok), "target token {tok} unseen in sources");
            }
        }
    }

    #[test]
    fn exemplar_spans_mark_slot_values() {
        let data = generate(&ToySpec::default());
        for k in [&data.travel_knowledge, &data.person_knowledge, &data.target_knowledge] {
            for (slot, sk) in &k.slots {
                assert_eq!(sk.exemplars.len(), 10, "slot {slot}");
                for ex in &sk.exemplars {
                    assert!(1 <= ex.sp && ex.sp <= ex.ep && ex.ep <= ex.tokens.len());
                }
            }
        }
    }

    #[test]
    fn ctx_vectors_cover_every_exemplar() {
        let data = generate(&ToySpec::default());
        for k in [&data.travel_knowledge, &data.person_knowledge, &data.target_knowledge] {
            for (slot, sk) in &k.slots {
                for i in 0..sk.exemplars.len() {
                    let (fwd, _) = data
                        .ctx_vectors
                        .get(&k.domain, slot, i)
                        .unwrap_or_else(|| panic!("missing ctx vectors for {slot}/{i}"));
                    assert_eq!(fwd.rows(), sk.exemplars[i].tokens.len());
                }
            }
        }
    }

    #[test]
    fn embeddings_cover_all_words() {
        let data = generate(&ToySpec::default());
        for s in data.travel.iter().chain(&data.person).chain(&data.target_train) {
            for tok in &s.tokens {
                assert!(data.embeddings.get(tok).is_some(), "no embedding for {tok}");
            }
        }
    }
}
