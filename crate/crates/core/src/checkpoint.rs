//! Checkpoint container: a little-endian u64 manifest length, a JSON
//! manifest (metadata block plus `{name -> {rows, cols, offset}}`), then
//! the concatenated little-endian f64 tensor payloads in manifest order
//! (names sort lexicographically; offsets are explicit regardless).

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Vocabulary, WordEmbeddings};
use crate::error::{Error, Result};
use crate::model::{FrozenInputs, Model, ModelConfig, OutputSpace, ParamStore};
use crate::numerics::Tensor;
use crate::trainer::TrainConfig;
use crate::TagLabel;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct MetaBlock {
    format_version: u32,
    version: String,
    vocab_sha256: String,
    strategy: String,
    head: String,
    hyperparameters: TrainConfig,
    model_config: ModelConfig,
    vocab: Vocabulary,
    output_space: OutputSpace,
    scalar_tags: Option<Vec<TagLabel>>,
    /// Word order of the frozen exemplar embedding table, if stored
    /// (the vectors live in the payload as `frozen.w_e`).
    frozen_words: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: MetaBlock,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Stable content hash of a vocabulary.
pub fn vocab_hash(vocab: &Vocabulary) -> String {
    let json = serde_json::to_string(vocab).expect("vocab serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a whole file, for run manifests.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

/// Write a model plus its training hyperparameters.
pub fn save(path: impl AsRef<Path>, model: &Model, train_cfg: &TrainConfig) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect();

    let frozen_words = model.frozen.word_embeddings.as_ref().map(|we| {
        let words: Vec<String> = we.words().cloned().collect();
        let mut table = Tensor::zeros(words.len(), we.dim());
        for (i, w) in words.iter().enumerate() {
            table.row_mut(i).copy_from_slice(we.get(w).expect("word present"));
        }
        tensors.insert("frozen.w_e".to_string(), table);
        words
    });

    let mut entries = BTreeMap::new();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        entries.insert(
            name.clone(),
            TensorEntry { rows: t.rows(), cols: t.cols(), offset },
        );
        offset += t.len() * 8;
    }

    let manifest = Manifest {
        meta: MetaBlock {
            format_version: FORMAT_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            vocab_sha256: vocab_hash(&model.vocab),
            strategy: model.cfg.strategy.name().to_string(),
            head: model.cfg.head.name().to_string(),
            hyperparameters: train_cfg.clone(),
            model_config: model.cfg.clone(),
            vocab: model.vocab.clone(),
            output_space: model.space.clone(),
            scalar_tags: model.scalar_tags.clone(),
            frozen_words,
        },
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut out = fs::File::create(path)?;
    out.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_json)?;
    for t in tensors.values() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a model and the hyperparameters it was trained with.
pub fn load(path: impl AsRef<Path>) -> Result<(Model, TrainConfig)> {
    let path = path.as_ref();
    let mut file = fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_json)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated manifest", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} unsupported (expected {FORMAT_VERSION})",
            path.display(),
            manifest.meta.format_version
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;

    let read_tensor = |entry: &TensorEntry, name: &str| -> Result<Tensor> {
        let bytes = entry.rows * entry.cols * 8;
        let end = entry.offset + bytes;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "{}: tensor `{name}` extends past the payload",
                path.display()
            )));
        }
        let data: Vec<f64> = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(entry.rows, entry.cols, data))
    };

    let mut params = ParamStore::new();
    let mut frozen_table: Option<Tensor> = None;
    for (name, entry) in &manifest.tensors {
        let tensor = read_tensor(entry, name)?;
        if name == "frozen.w_e" {
            frozen_table = Some(tensor);
        } else {
            params.insert(name.clone(), tensor);
        }
    }

    let mut vocab = manifest.meta.vocab;
    vocab.rebuild_index();
    let expected = manifest.meta.vocab_sha256;
    let actual = vocab_hash(&vocab);
    if expected != actual {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary hash mismatch ({expected} vs {actual})",
            path.display()
        )));
    }

    let word_embeddings = match (manifest.meta.frozen_words, frozen_table) {
        (Some(words), Some(table)) => {
            let mut we = WordEmbeddings::new(table.cols());
            for (i, w) in words.iter().enumerate() {
                we.insert(w.clone(), table.row(i).to_vec());
            }
            Some(we)
        }
        (None, None) => None,
        _ => {
            return Err(Error::Checkpoint(format!(
                "{}: frozen embedding words and tensor are inconsistent",
                path.display()
            )))
        }
    };

    let model = Model::from_parts(
        manifest.meta.model_config,
        vocab,
        params,
        manifest.meta.output_space,
        manifest.meta.scalar_tags,
        FrozenInputs { word_embeddings, ctx_vectors: None },
    );
    Ok((model, manifest.meta.hyperparameters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, DomainKnowledge, Sentence};
    use crate::model::HeadKind;
    use crate::TagLabel;

    fn tiny_model() -> (Model, TrainConfig) {
        let knowledge = DomainKnowledge::parse(
            r#"{"domain":"d","slots":{"x":{"atoms":["a1"]}}}"#,
            "t",
        )
        .unwrap();
        let data = vec![Sentence::new(
            vec!["hello".into(), "world".into()],
            vec![TagLabel::Outside, TagLabel::Begin("x".into())],
            "d",
        )
        .unwrap()];
        let vocab = build_vocab(&data, &[], 1).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.embed_dim = 4;
        cfg.hidden = 3;
        cfg.strategy = crate::labelspace::Strategy::AtomicConcept;
        cfg.head = HeadKind::CrfScalar;
        let model = Model::init(
            cfg.model_config(),
            vocab,
            OutputSpace::Atoms { atoms: vec!["a1".into()] },
            Some(knowledge.tag_set()),
            FrozenInputs::default(),
            0.2,
            7,
            None,
        )
        .unwrap();
        (model, cfg)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (model, cfg) = tiny_model();
        let path = std::env::temp_dir().join("slotfill-ckpt-roundtrip.bin");
        save(&path, &model, &cfg).unwrap();
        let (loaded, loaded_cfg) = load(&path).unwrap();
        let mut expect = model.params.names();
        expect.sort();
        assert_eq!(loaded.params.names(), expect);
        for (name, tensor) in model.params.iter() {
            assert_eq!(loaded.params.get(name), tensor, "tensor {name}");
        }
        assert_eq!(loaded.space, model.space);
        assert_eq!(loaded.scalar_tags, model.scalar_tags);
        assert_eq!(loaded.vocab, model.vocab);
        assert_eq!(loaded_cfg.hidden, cfg.hidden);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn truncated_file_errors() {
        let (model, cfg) = tiny_model();
        let path = std::env::temp_dir().join("slotfill-ckpt-truncated.bin");
        save(&path, &model, &cfg).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn vocab_hash_is_stable_and_content_sensitive() {
        let (model, _) = tiny_model();
        let h1 = vocab_hash(&model.vocab);
        let h2 = vocab_hash(&model.vocab.clone());
        assert_eq!(h1, h2);
    }
}
