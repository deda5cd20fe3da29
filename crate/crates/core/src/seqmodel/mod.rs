//! Causal sequence model over the shared token vocabulary.

pub mod hashed;
pub mod model;
pub mod sample;
pub mod train;
pub mod vocab;

pub use hashed::{HashedModel, HashedState};
pub use model::{AutoregressiveModel, KvState, LmExample, LmTarget, ModelConfig, SequenceModel, Trainable};
pub use sample::{draw, sample_constrained, sample_sequence, Sampled};
pub use train::{
    build_alignment_corpus, build_fast_examples, history_tokens, history_window, sequence_examples, sid_embedding_rows,
    train_alignment, train_fast, train_lm, TrainConfig, TrainReport,
};
pub use vocab::{TokenId, VocabSpec, Vocabulary};
