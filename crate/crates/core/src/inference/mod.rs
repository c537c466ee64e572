//! Everything after training: bucketed perplexity, greedy and beam decoding,
//! multi-turn chat sessions, attention traces and robustness probes.

mod perplexity;
mod probe;
mod search;
mod session;
mod trace;

pub use perplexity::{
    pair_nll, perplexity, topic_vectors, Bucket, PerplexityReport, LONG_ABOVE, SHORT_BELOW,
};
pub use probe::{
    robustness_probe, NoiseOp, NoiseSpec, Positions, ProbeRecord, ProbeReport, Responder,
    TopicClasses,
};
pub use search::{
    beam_search, greedy_decode, greedy_trace, BeamHypothesis, DecodeSettings, GreedyTrace,
};
pub use session::ChatSession;
pub use trace::{attention_trace, AttentionTrace};

#[cfg(test)]
mod tests;
