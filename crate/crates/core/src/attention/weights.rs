//! Attention weights: per-layer projection matrices and norm gains.
//!
//! Initialization walks a fixed field order per layer and draws each
//! matrix from the same seeded stream, so two configs that describe the
//! same computation (e.g. `gqa` with `kv_heads == n_heads` vs `mha`, or a
//! cross-layer variant with `sharing_factor == 1` vs its within-layer
//! base) produce bit-identical weights from the same seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AttnConfig;
use crate::error::Result;
use crate::tensor::Tensor;

/// Weights owned by one layer. Fields a layer does not own under the
/// active variant/sharing mode are `None`; consumers reach shared weights
/// through their producer's entry.
#[derive(Debug, Default, Clone)]
pub struct LayerWeights {
    /// Direct query projection `[d_model x n_heads*head_dim]`
    /// (absent when the low-rank query path is active).
    pub w_q: Option<Tensor>,
    /// Low-rank query down-projection `[d_model x q_lora_rank]`.
    pub w_q_a: Option<Tensor>,
    /// Norm gain on the compressed query `[1 x q_lora_rank]`.
    pub q_gain: Option<Tensor>,
    /// Low-rank query up-projection `[q_lora_rank x n_heads*head_dim]`.
    pub w_q_b: Option<Tensor>,
    /// Latent down-projection `[d_model x latent_dim]` (latent producers).
    pub w_c: Option<Tensor>,
    /// Norm gain applied to the latent before caching `[1 x latent_dim]`.
    pub c_gain: Option<Tensor>,
    /// Key projection: `[d_model x kv_heads*head_dim]` for K/V-caching
    /// variants, `[latent_dim x n_heads*head_dim]` for latent variants.
    pub w_k: Option<Tensor>,
    /// Value projection, same shape as `w_k`.
    pub w_v: Option<Tensor>,
    /// Decoupled rotary query projection `[d_model x n_heads*rope_dim]`.
    pub w_q_rope: Option<Tensor>,
    /// Decoupled rotary key projection `[d_model x rope_dim]`
    /// (single head, broadcast to all query heads).
    pub w_k_rope: Option<Tensor>,
    /// Output projection `[n_heads*head_dim x d_model]`.
    pub w_o: Option<Tensor>,
}

/// All attention weights for a stack.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub layers: Vec<LayerWeights>,
}

/// The matrices (`name`, rows, cols, needs random init) a layer owns.
/// Norm gains are listed too (initialized to ones, no random draw).
fn layer_plan(cfg: &AttnConfig, layer: usize) -> Vec<(&'static str, usize, usize, bool)> {
    let d = cfg.d_model;
    let qw = cfg.n_heads * cfg.head_dim;
    let mut plan = Vec::new();
    if let Some(r) = cfg.q_lora_rank {
        plan.push(("w_q_a", d, r, true));
        plan.push(("q_gain", 1, r, false));
        plan.push(("w_q_b", r, qw, true));
    } else {
        plan.push(("w_q", d, qw, true));
    }
    if cfg.variant.is_latent() {
        if cfg.is_producer(layer) {
            plan.push(("w_c", d, cfg.latent_dim, true));
            plan.push(("c_gain", 1, cfg.latent_dim, false));
        }
        if cfg.owns_kv_proj(layer) {
            plan.push(("w_k", cfg.latent_dim, qw, true));
            plan.push(("w_v", cfg.latent_dim, qw, true));
        }
        if cfg.rope_dim > 0 {
            plan.push(("w_q_rope", d, cfg.n_heads * cfg.rope_dim, true));
            if cfg.owns_krope(layer) {
                plan.push(("w_k_rope", d, cfg.rope_dim, true));
            }
        }
    } else {
        let kvw = cfg.kv_heads() * cfg.head_dim;
        if cfg.share_hidden_states || cfg.is_producer(layer) {
            plan.push(("w_k", d, kvw, true));
            plan.push(("w_v", d, kvw, true));
        }
    }
    plan.push(("w_o", qw, d, true));
    plan
}

/// Glorot-uniform sample: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::param_from_vec(rows, cols, data)
}

impl AttnWeights {
    /// Initialize all layers from one seeded stream (layer-major, fixed
    /// field order within a layer).
    pub fn init(cfg: &AttnConfig, seed: u64) -> Result<AttnWeights> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttnWeights::init_with_rng(cfg, &mut rng)
    }

    /// Initialize drawing from a caller-provided stream (lets a model
    /// embed attention init inside its own deterministic draw order).
    pub fn init_with_rng(cfg: &AttnConfig, rng: &mut ChaCha8Rng) -> Result<AttnWeights> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let mut lw = LayerWeights::default();
            for (name, rows, cols, random) in layer_plan(cfg, layer) {
                let t = if random {
                    glorot(rng, rows, cols)?
                } else {
                    Tensor::param_from_vec(rows, cols, vec![1.0; rows * cols])?
                };
                lw.set(name, t);
            }
            layers.push(lw);
        }
        Ok(AttnWeights { layers })
    }

    /// Parameters in deterministic order, named for checkpointing.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, lw) in self.layers.iter().enumerate() {
            for (name, t) in lw.named() {
                out.push((format!("attn.{i}.{name}"), t));
            }
        }
        out
    }

    /// Total parameter scalars actually allocated.
    pub fn allocated_params(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Closed-form parameter count for a config (must match allocation).
    pub fn param_count(cfg: &AttnConfig) -> u64 {
        (0..cfg.n_layers)
            .flat_map(|l| layer_plan(cfg, l))
            .map(|(_, r, c, _)| (r * c) as u64)
            .sum()
    }

    /// Replace parameters with new tensors in `named_params` order
    /// (the optimizer builds updated tensors; data is immutable).
    pub fn replace_params(&mut self, new: &mut impl Iterator<Item = Tensor>) {
        for lw in &mut self.layers {
            for name in lw.owned_names() {
                lw.set(&name, new.next().expect("parameter stream too short"));
            }
        }
    }

    /// Detached copy (shared buffers, no gradient tracking) for decoding.
    pub fn detach(&self) -> AttnWeights {
        AttnWeights {
            layers: self
                .layers
                .iter()
                .map(|lw| {
                    let mut d = LayerWeights::default();
                    for (name, t) in lw.named() {
                        d.set(&name, t.detach());
                    }
                    d
                })
                .collect(),
        }
    }
}

impl LayerWeights {
    fn set(&mut self, name: &str, t: Tensor) {
        match name {
            "w_q" => self.w_q = Some(t),
            "w_q_a" => self.w_q_a = Some(t),
            "q_gain" => self.q_gain = Some(t),
            "w_q_b" => self.w_q_b = Some(t),
            "w_c" => self.w_c = Some(t),
            "c_gain" => self.c_gain = Some(t),
            "w_k" => self.w_k = Some(t),
            "w_v" => self.w_v = Some(t),
            "w_q_rope" => self.w_q_rope = Some(t),
            "w_k_rope" => self.w_k_rope = Some(t),
            "w_o" => self.w_o = Some(t),
            _ => unreachable!("unknown weight field {name}"),
        }
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        match name {
            "w_q" => self.w_q.as_ref(),
            "w_q_a" => self.w_q_a.as_ref(),
            "q_gain" => self.q_gain.as_ref(),
            "w_q_b" => self.w_q_b.as_ref(),
            "w_c" => self.w_c.as_ref(),
            "c_gain" => self.c_gain.as_ref(),
            "w_k" => self.w_k.as_ref(),
            "w_v" => self.w_v.as_ref(),
            "w_q_rope" => self.w_q_rope.as_ref(),
            "w_k_rope" => self.w_k_rope.as_ref(),
            "w_o" => self.w_o.as_ref(),
            _ => unreachable!("unknown weight field {name}"),
        }
    }

    const FIELD_ORDER: [&'static str; 11] = [
        "w_q", "w_q_a", "q_gain", "w_q_b", "w_c", "c_gain", "w_k", "w_v", "w_q_rope",
        "w_k_rope", "w_o",
    ];

    fn owned_names(&self) -> Vec<String> {
        Self::FIELD_ORDER
            .iter()
            .filter(|n| self.get(n).is_some())
            .map(|n| n.to_string())
            .collect()
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        Self::FIELD_ORDER
            .iter()
            .filter_map(|n| self.get(n).map(|t| (n.to_string(), t.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::quant::QuantConfig;

    fn cfg(variant: Variant) -> AttnConfig {
        AttnConfig {
            variant,
            n_layers: 4,
            d_model: 16,
            n_heads: 4,
            head_dim: 4,
            kv_heads: None,
            latent_dim: 8,
            rope_dim: 4,
            sharing_factor: 2,
            q_lora_rank: None,
            share_hidden_states: false,
            quant: None,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }

    fn kv_cfg(variant: Variant) -> AttnConfig {
        AttnConfig { latent_dim: 0, rope_dim: 0, sharing_factor: 1, ..cfg(variant) }
    }

    #[test]
    fn closed_form_count_matches_allocation() {
        for c in [
            kv_cfg(Variant::Mha),
            kv_cfg(Variant::Mqa),
            AttnConfig { kv_heads: Some(2), ..kv_cfg(Variant::Gqa) },
            AttnConfig { sharing_factor: 2, ..kv_cfg(Variant::Cla) },
            AttnConfig {
                sharing_factor: 2,
                share_hidden_states: true,
                ..kv_cfg(Variant::Cla)
            },
            AttnConfig { sharing_factor: 1, ..cfg(Variant::Mla) },
            cfg(Variant::CllaShareLatent),
            cfg(Variant::CllaShareKvproj),
            cfg(Variant::CllaShareKrope),
            AttnConfig { q_lora_rank: Some(6), ..cfg(Variant::CllaShareLatent) },
            AttnConfig {
                quant: Some(QuantConfig { group_size: 4, ..QuantConfig::default() }),
                ..cfg(Variant::CllaShareLatent)
            },
        ] {
            let w = AttnWeights::init(&c, 9).unwrap();
            assert_eq!(
                w.allocated_params(),
                AttnWeights::param_count(&c),
                "variant {:?}",
                c.variant
            );
        }
    }

    #[test]
    fn consumers_do_not_own_shared_fields() {
        let w = AttnWeights::init(&cfg(Variant::CllaShareKrope), 3).unwrap();
        assert!(w.layers[0].w_c.is_some() && w.layers[1].w_c.is_none());
        assert!(w.layers[0].w_k.is_some() && w.layers[1].w_k.is_none());
        assert!(w.layers[0].w_k_rope.is_some() && w.layers[1].w_k_rope.is_none());
        // Every layer still projects its own queries.
        assert!(w.layers[1].w_q.is_some() && w.layers[1].w_q_rope.is_some());

        let w = AttnWeights::init(&cfg(Variant::CllaShareLatent), 3).unwrap();
        assert!(w.layers[1].w_c.is_none());
        assert!(w.layers[1].w_k.is_some() && w.layers[1].w_k_rope.is_some());
    }

    #[test]
    fn equivalent_configs_draw_identical_weights() {
        // gqa with kv_heads == n_heads is mha.
        let mha = AttnWeights::init(&kv_cfg(Variant::Mha), 42).unwrap();
        let gqa = AttnWeights::init(
            &AttnConfig { kv_heads: Some(4), ..kv_cfg(Variant::Gqa) },
            42,
        )
        .unwrap();
        for (a, b) in mha.named_params().iter().zip(gqa.named_params()) {
            assert_eq!(a.0, b.0);
            assert!(a.1.bit_eq(&b.1));
        }

        // Every clla mode with F=1 matches mla.
        let mla = AttnWeights::init(&AttnConfig { sharing_factor: 1, ..cfg(Variant::Mla) }, 42)
            .unwrap();
        for v in [Variant::CllaShareLatent, Variant::CllaShareKvproj, Variant::CllaShareKrope] {
            let c = AttnWeights::init(&AttnConfig { sharing_factor: 1, ..cfg(v) }, 42).unwrap();
            for (a, b) in mla.named_params().iter().zip(c.named_params()) {
                assert!(a.1.bit_eq(&b.1), "{} differs for {v}", a.0);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = AttnWeights::init(&cfg(Variant::CllaShareLatent), 7).unwrap();
        let b = AttnWeights::init(&cfg(Variant::CllaShareLatent), 7).unwrap();
        let c = AttnWeights::init(&cfg(Variant::CllaShareLatent), 8).unwrap();
        assert!(a.named_params()[0].1.bit_eq(&b.named_params()[0].1));
        assert!(!a.named_params()[0].1.bit_eq(&c.named_params()[0].1));
    }
}
