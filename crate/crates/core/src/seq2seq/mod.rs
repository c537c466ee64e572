//! Encoder-decoder models: a shared stacked-LSTM encoder and five decoders
//! (Vanilla, SoftAttention, Context-In, Context-IO, Context-Attn).
//!
//! Everything here builds nodes on a [`Graph`](crate::tensor::Graph); a
//! model's parameters are placed on a graph once per example with
//! [`Seq2Seq::bind`] and then reused across all time steps.

mod attention;
mod cells;
mod config;
mod decode;
mod model;

pub use attention::{
    attend, attention_soft, attention_vector_cnn, cnn_memory, gated_context_attention, soft_memory,
    AttentionMemory,
};
pub use cells::{clstm_step, lstm_cell, lstm_step, CellState, LstmState};
pub use config::{ContextIoMode, DecoderKind, ModelConfig};
pub use decode::{
    batch_logprob, decoder_step, encode, encode_batch, prepare, sequence_logprob, token_nll,
    BatchScore, DecodeSetup, EncodedSource, SequenceScore, StepOutput,
};
pub use model::{AttnVars, GateVars, LayerVars, ModelVars, Seq2Seq};

#[cfg(test)]
mod tests;
