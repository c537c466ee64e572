use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five decoder variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    Vanilla,
    SoftAttention,
    ContextIn,
    ContextIo,
    ContextAttn,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 5] = [
        DecoderKind::Vanilla,
        DecoderKind::SoftAttention,
        DecoderKind::ContextIn,
        DecoderKind::ContextIo,
        DecoderKind::ContextAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Vanilla => "vanilla",
            DecoderKind::SoftAttention => "soft-attention",
            DecoderKind::ContextIn => "context-in",
            DecoderKind::ContextIo => "context-io",
            DecoderKind::ContextAttn => "context-attn",
        }
    }

    /// Whether the decoder consumes a topic vector.
    pub fn uses_context(self) -> bool {
        matches!(
            self,
            DecoderKind::ContextIn | DecoderKind::ContextIo | DecoderKind::ContextAttn
        )
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, DecoderKind::SoftAttention | DecoderKind::ContextAttn)
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Ok(match norm.as_str() {
            "vanilla" => DecoderKind::Vanilla,
            "soft-attention" | "soft-attn" | "attention" => DecoderKind::SoftAttention,
            "context-in" | "clstm" => DecoderKind::ContextIn,
            "context-io" => DecoderKind::ContextIo,
            "context-attn" | "context-attention" => DecoderKind::ContextAttn,
            _ => {
                return Err(Error::Config(format!(
                    "unknown decoder kind {s:?} (expected vanilla, soft-attention, context-in, context-io or context-attn)"
                )))
            }
        })
    }
}

/// How Context-IO injects the topic vector at the decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextIoMode {
    /// `embed(y) + W_cx c` as the first-layer input.
    Additive,
    /// First-layer previous cell scaled elementwise by `1 + W_cx c`.
    Modulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: DecoderKind,
    pub n_layers: usize,
    pub hidden: usize,
    pub embed: usize,
    pub vocab_size: usize,
    pub k_topics: usize,
    pub dropout: f64,
    /// Defaults to true for Vanilla and false for every other kind.
    pub reverse_source: Option<bool>,
    /// Width of the Context-Attn key convolution (odd).
    pub attn_width: usize,
    /// Inner dimension of the additive attention score.
    pub attn_dim: usize,
    /// Context-In: separate `K x hidden` projection per gate instead of one shared.
    pub per_gate_context: bool,
    pub context_io_mode: ContextIoMode,
    pub max_len: usize,
    pub init_scale: f64,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: DecoderKind::Vanilla,
            n_layers: 1,
            hidden: 64,
            embed: 32,
            vocab_size: 0,
            k_topics: 8,
            dropout: 0.2,
            reverse_source: None,
            attn_width: 3,
            attn_dim: 32,
            per_gate_context: false,
            context_io_mode: ContextIoMode::Additive,
            max_len: 64,
            init_scale: 0.08,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: DecoderKind, vocab_size: usize) -> Self {
        Self {
            kind,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn reverses_source(&self) -> bool {
        self.reverse_source
            .unwrap_or(self.kind == DecoderKind::Vanilla)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("vocab_size", self.vocab_size),
            ("k_topics", self.k_topics),
            ("attn_dim", self.attn_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if self.attn_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attn_width must be odd, got {}",
                self.attn_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}
