//! Semantic-ID generative recommendation with an adaptive fast/slow router.
//!
//! Items are quantized into discrete code paths, a causal transformer
//! decodes them under a prefix trie, and a learned planner chooses per user
//! between direct retrieval, retrieval plus ranking, and reasoning.

// numeric kernels index several parallel buffers by one position
#![allow(clippy::needless_range_loop)]

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod jsonl;
pub mod nn;
pub mod planner;
pub mod quantizer;
pub mod ranker;
pub mod seqmodel;
pub mod slowpath;

pub use error::{Error, Result};
