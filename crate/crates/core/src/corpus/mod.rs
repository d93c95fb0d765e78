//! Text to aligned sentences to pretraining examples, plus the synthetic
//! world used for end-to-end runs.

pub mod aligned;
pub mod gazetteer;
pub mod pretrain;
pub mod synth;
pub mod taskfile;
pub mod vocab;

pub use aligned::{align, annotate, filter_sentences, AlignedSentence, IndexedSentence};
pub use gazetteer::{Gazetteer, Mention};
pub use pretrain::{
    build_epoch, corrupt_entities, corrupt_tokens, pack, pair_sentences, CorruptionStats,
    EntitySlot, EntityTarget, PipelineConfig, PretrainExample,
};
pub use taskfile::{TaskRecord, TaskToken};
pub use vocab::{Piece, SubwordVocab};
