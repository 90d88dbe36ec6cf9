//! Attention variant family over one shared scaled-dot-product core.
//!
//! All variants are configurations of the same machinery:
//!
//! - `mha`: every layer caches per-head K/V.
//! - `mqa` / `gqa`: query heads share `kv_heads` cached K/V groups
//!   (`mqa` is `gqa` with a single group).
//! - `cla`: like `gqa`, but layers within a sharing group of size
//!   `sharing_factor` reuse the group's first layer ("producer") cache.
//!   With `share_hidden_states` the producer caches the hidden states and
//!   each layer applies its own K/V projections instead.
//! - `mla`: each layer caches one low-rank latent row per token (plus a
//!   small shared-across-heads rotary key) and reconstructs K/V on read.
//! - `clla_share_latent` / `clla_share_kvproj` / `clla_share_krope`:
//!   cross-layer latent attention; the producer's latent is shared across
//!   the group. The three modes share progressively more: only the latent;
//!   the latent plus the K/V reconstruction weights; those plus the rotary
//!   key stream.
//!
//! Setting `quant` fake-quantizes the cached latent (straight-through
//! gradients), so the quantized variant trains against exactly what it
//! will decode from.

pub mod forward;
pub mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantConfig;

/// Which member of the attention family a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mha,
    Mqa,
    Gqa,
    Cla,
    Mla,
    CllaShareLatent,
    CllaShareKvproj,
    CllaShareKrope,
}

impl Variant {
    pub fn is_latent(self) -> bool {
        matches!(
            self,
            Variant::Mla
                | Variant::CllaShareLatent
                | Variant::CllaShareKvproj
                | Variant::CllaShareKrope
        )
    }

    pub fn is_cross_layer(self) -> bool {
        matches!(
            self,
            Variant::Cla
                | Variant::CllaShareLatent
                | Variant::CllaShareKvproj
                | Variant::CllaShareKrope
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mha => "mha",
            Variant::Mqa => "mqa",
            Variant::Gqa => "gqa",
            Variant::Cla => "cla",
            Variant::Mla => "mla",
            Variant::CllaShareLatent => "clla_share_latent",
            Variant::CllaShareKvproj => "clla_share_kvproj",
            Variant::CllaShareKrope => "clla_share_krope",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn one() -> usize {
    1
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

/// Geometry and behavior of the attention stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    pub variant: Variant,
    pub n_layers: usize,
    pub d_model: usize,
    /// Query heads.
    pub n_heads: usize,
    pub head_dim: usize,
    /// K/V head groups for `gqa`/`cla`; defaults to `n_heads`.
    #[serde(default)]
    pub kv_heads: Option<usize>,
    /// Latent width for latent variants.
    #[serde(default)]
    pub latent_dim: usize,
    /// Decoupled rotary key/query width for latent variants (may be 0).
    #[serde(default)]
    pub rope_dim: usize,
    /// Layers per cache-sharing group (cross-layer variants).
    #[serde(default = "one")]
    pub sharing_factor: usize,
    /// Optional low-rank bottleneck for the query projection.
    #[serde(default)]
    pub q_lora_rank: Option<usize>,
    /// `cla` only: cache hidden states and give every layer its own K/V
    /// projections, instead of caching the producer's K/V.
    #[serde(default)]
    pub share_hidden_states: bool,
    /// Quantize the cached latent (latent variants only).
    #[serde(default)]
    pub quant: Option<QuantConfig>,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

/// First layer of the sharing group containing `layer`: groups are
/// consecutive blocks of `f` layers, so the producer is `layer` rounded
/// down to a multiple of `f`. A trailing group shorter than `f` still has
/// its own producer.
pub fn layer_source(layer: usize, f: usize) -> usize {
    (layer / f) * f
}

impl AttnConfig {
    /// K/V head groups after variant normalization.
    pub fn kv_heads(&self) -> usize {
        match self.variant {
            Variant::Mha => self.n_heads,
            Variant::Mqa => 1,
            Variant::Gqa | Variant::Cla => self.kv_heads.unwrap_or(self.n_heads),
            _ => self.n_heads,
        }
    }

    /// Cache-sharing group size (1 for within-layer variants).
    pub fn f(&self) -> usize {
        if self.variant.is_cross_layer() {
            self.sharing_factor
        } else {
            1
        }
    }

    pub fn is_producer(&self, layer: usize) -> bool {
        layer_source(layer, self.f()) == layer
    }

    /// Softmax scaling uses the full per-head key width.
    pub fn attn_scale(&self) -> f64 {
        let width = if self.variant.is_latent() {
            self.head_dim + self.rope_dim
        } else {
            self.head_dim
        };
        1.0 / (width as f64).sqrt()
    }

    /// Does `layer` own K/V reconstruction weights (latent variants)?
    pub fn owns_kv_proj(&self, layer: usize) -> bool {
        match self.variant {
            Variant::CllaShareKvproj | Variant::CllaShareKrope => self.is_producer(layer),
            _ => true,
        }
    }

    /// Does `layer` own (and append) a rotary key stream?
    pub fn owns_krope(&self, layer: usize) -> bool {
        self.rope_dim > 0
            && match self.variant {
                Variant::CllaShareKrope => self.is_producer(layer),
                _ => true,
            }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers must be positive"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return Err(Error::config("d_model, n_heads and head_dim must be positive"));
        }
        if self.sharing_factor == 0 {
            return Err(Error::config("sharing_factor must be positive"));
        }
        if !self.variant.is_cross_layer() && self.sharing_factor != 1 {
            return Err(Error::config(format!(
                "sharing_factor {} is only meaningful for cross-layer variants, not {}",
                self.sharing_factor, self.variant
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::config(format!("rope_base must be positive, got {}", self.rope_base)));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(Error::config(format!("norm_eps must be >= 0, got {}", self.norm_eps)));
        }
        match self.variant {
            Variant::Mha | Variant::Mqa | Variant::Gqa | Variant::Cla => {
                let g = self.kv_heads();
                if let Some(k) = self.kv_heads {
                    let expect = match self.variant {
                        Variant::Mha => Some(self.n_heads),
                        Variant::Mqa => Some(1),
                        _ => None,
                    };
                    if let Some(e) = expect {
                        if k != e {
                            return Err(Error::config(format!(
                                "{} fixes kv_heads to {e}, got {k}",
                                self.variant
                            )));
                        }
                    }
                }
                if g == 0 || !self.n_heads.is_multiple_of(g) {
                    return Err(Error::config(format!(
                        "kv_heads {g} must divide n_heads {}",
                        self.n_heads
                    )));
                }
                if self.latent_dim != 0 || self.rope_dim != 0 {
                    return Err(Error::config(format!(
                        "latent_dim/rope_dim apply only to latent variants, not {}",
                        self.variant
                    )));
                }
                if self.q_lora_rank.is_some() {
                    return Err(Error::config(
                        "q_lora_rank applies only to latent variants".to_string(),
                    ));
                }
                if self.quant.is_some() {
                    return Err(Error::config(format!(
                        "quant applies only to latent variants, not {}",
                        self.variant
                    )));
                }
                if self.share_hidden_states && self.variant != Variant::Cla {
                    return Err(Error::config(
                        "share_hidden_states applies only to cla".to_string(),
                    ));
                }
            }
            _ => {
                if self.latent_dim == 0 {
                    return Err(Error::config(format!(
                        "{} requires latent_dim > 0",
                        self.variant
                    )));
                }
                if !self.rope_dim.is_multiple_of(2) {
                    return Err(Error::config(format!(
                        "rope_dim must be even, got {}",
                        self.rope_dim
                    )));
                }
                if self.kv_heads.is_some() {
                    return Err(Error::config(
                        "kv_heads does not apply to latent variants (every head reads the latent)"
                            .to_string(),
                    ));
                }
                if self.share_hidden_states {
                    return Err(Error::config(
                        "share_hidden_states applies only to cla".to_string(),
                    ));
                }
                if self.variant == Variant::Mla && self.sharing_factor != 1 {
                    return Err(Error::config(
                        "mla has no cross-layer sharing; use a clla variant for sharing_factor > 1"
                            .to_string(),
                    ));
                }
                if let Some(r) = self.q_lora_rank {
                    if r == 0 {
                        return Err(Error::config("q_lora_rank must be positive".to_string()));
                    }
                }
                if let Some(q) = &self.quant {
                    q.validate_for_width(self.latent_dim)?;
                }
            }
        }
        Ok(())
    }
}
