//! A small pre-norm decoder-only transformer with byte-level tokens.
//!
//! Each layer owns four prunable projections: the concatenated `W_QKV`, the
//! attention output `W_O`, and the two FFN matrices `W_1`, `W_2`. Every
//! projection is applied through [`Network::project`], which is where pruned
//! models substitute their low-rank factors and where activation taps record
//! operand pairs.

mod cost;
mod forward;
pub mod tokenizer;
mod weights;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cost::{count_params, estimate_flops_per_token, site_flops};
pub use forward::{
    attention, causal_attention_weights, decode_agrees, ffn, forward, gelu, greedy_decode,
    layer_norm, multi_head, ActivationCapture, CaptureRecorder, Network, SiteCapture,
    STOP_TOKEN,
};
pub use weights::{load_model, model_fingerprint, save_model, InitOptions, LayerWeights, ModelWeights};

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size != BYTE_VOCAB {
            return Err(Error::InvalidConfig(format!(
                "byte-level vocabulary must have {BYTE_VOCAB} entries, got {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_sites(&self) -> usize {
        4 * self.n_layers
    }

    /// All prunable sites, layer-major in `SiteKind::ALL` order.
    pub fn sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        (0..self.n_layers).flat_map(|layer| SiteKind::ALL.map(|kind| SiteId { layer, kind }))
    }

    /// `(d_in, d_out)` of a site's weight matrix.
    pub fn site_dims(&self, kind: SiteKind) -> (usize, usize) {
        let d = self.d_model;
        match kind {
            SiteKind::Qkv => (d, 3 * d),
            SiteKind::Out => (d, d),
            SiteKind::Ffn1 => (d, self.d_ff),
            SiteKind::Ffn2 => (self.d_ff, d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteKind {
    #[serde(rename = "QKV")]
    Qkv,
    #[serde(rename = "OUT")]
    Out,
    #[serde(rename = "FFN1")]
    Ffn1,
    #[serde(rename = "FFN2")]
    Ffn2,
}

impl SiteKind {
    pub const ALL: [SiteKind; 4] = [SiteKind::Qkv, SiteKind::Out, SiteKind::Ffn1, SiteKind::Ffn2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::Qkv => "QKV",
            SiteKind::Out => "OUT",
            SiteKind::Ffn1 => "FFN1",
            SiteKind::Ffn2 => "FFN2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One prunable weight matrix: a layer and which of its four projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }

    /// Position in the flat `4·n_layers` ordering.
    pub fn index(self) -> usize {
        4 * self.layer + self.kind.index()
    }

    pub fn from_index(index: usize) -> Self {
        Self {
            layer: index / 4,
            kind: SiteKind::ALL[index % 4],
        }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.kind)
    }
}
