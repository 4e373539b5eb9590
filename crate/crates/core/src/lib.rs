//! Slot-filling models with prior-knowledge label embeddings.
//!
//! The crate builds BLSTM taggers with softmax or linear-chain CRF output
//! layers, where each output tag is represented either as a one-hot vector
//! or as a distributed embedding derived from domain knowledge (atomic
//! concepts, slot descriptions, slot exemplars). On top of the single-domain
//! tagger it provides masked multi-domain pretraining, parameter transfer
//! into a target domain, and a bilinear label-embedding CRF transition model.

pub mod adaptation;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod labelspace;
pub mod model;
pub mod numerics;
pub mod toy;
pub mod trainer;

pub use corpus::{Chunk, DomainKnowledge, Sentence, TagLabel, Vocabulary};
pub use error::{Error, Result};
pub use labelspace::{LabelMatrix, MaskVector, Strategy};
pub use model::{HeadKind, Model};
pub use numerics::{Tape, Tensor};
pub use trainer::{TrainConfig, TrainReport};
