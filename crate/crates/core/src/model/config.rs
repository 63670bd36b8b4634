use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which self-mixing sublayer the encoder and decoder use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    Vanilla,
    Sag,
    SagConv,
    SagFixedSpan,
    SagT5,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::Vanilla,
        AttentionVariant::Sag,
        AttentionVariant::SagConv,
        AttentionVariant::SagFixedSpan,
        AttentionVariant::SagT5,
    ];

    pub fn gated(self) -> bool {
        self != AttentionVariant::Vanilla
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::Vanilla => "vanilla",
            AttentionVariant::Sag => "sag",
            AttentionVariant::SagConv => "sag_conv",
            AttentionVariant::SagFixedSpan => "sag_fixed_span",
            AttentionVariant::SagT5 => "sag_t5",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Architecture hyperparameters. Encoder and decoder share sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: AttentionVariant,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Attention span for the fixed-span and relative-bias variants.
    pub span: usize,
    /// Convolution width for `sag_conv`.
    pub kernel_size: usize,
    pub beta0_encoder: f64,
    pub beta0_decoder: f64,
    /// Also gate decoder→encoder attention.
    pub gate_cross_attention: bool,
    pub max_positions: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: AttentionVariant::Vanilla,
            layers: 4,
            heads: 4,
            embed_dim: 128,
            ffn_dim: 256,
            dropout: 0.1,
            attention_dropout: 0.1,
            span: 4,
            kernel_size: 9,
            beta0_encoder: -1.0,
            beta0_decoder: -1.0,
            gate_cross_attention: false,
            max_positions: 64,
            src_vocab: 16,
            tgt_vocab: 9,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.embed_dim == 0 || self.ffn_dim == 0 {
            return fail("layers, heads, embed_dim and ffn_dim must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size {} must be odd", self.kernel_size));
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.max_positions == 0 || self.src_vocab == 0 || self.tgt_vocab == 0 {
            return fail("max_positions and vocabulary sizes must be positive".into());
        }
        Ok(())
    }

    /// Pretty JSON with fields in declaration order.
    pub fn canonical_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parses canonical text; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
