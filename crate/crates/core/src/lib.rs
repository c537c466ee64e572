//! Context-conditioned sequence-to-sequence response generation.
//!
//! The crate bundles a small reverse-mode differentiation core ([`tensor`]),
//! character-level corpus handling with a synthetic topic-labeled generator
//! ([`corpus`]), a convolutional topic classifier ([`topic_cnn`]), five
//! encoder-decoder variants ([`seq2seq`]), a curriculum trainer with binary
//! checkpoints ([`trainer`]), and evaluation/decoding tools ([`inference`]).

pub mod corpus;
pub mod error;
pub mod inference;
pub mod seq2seq;
pub mod tensor;
pub mod topic_cnn;
pub mod trainer;
mod util;

pub use error::{Error, Result};
pub use util::write_atomic;
