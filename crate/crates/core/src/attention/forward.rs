//! One attention forward pass serving every variant.
//!
//! The same code path handles all family members; variants only change
//! which projections exist, which layer's cache slot is read, and whether
//! a latent or K/V rows are appended. Identity collapses (`gqa` with all
//! heads == `mha`, any `clla_*` with `sharing_factor == 1` == `mla`,
//! `cla` with `sharing_factor == 1` == `gqa`) are therefore exact: the
//! arithmetic is literally the same instructions over the same weights.
//!
//! Within one forward step the producer layer must run before its
//! consumers (layers run in order 0..n), so a consumer always sees shared
//! rows for the tokens it is about to attend over; this is checked and
//! mis-sequencing is a cache-state error.

use super::weights::{AttnWeights, LayerWeights};
use super::{layer_source, AttnConfig};
use crate::cache::KVCache;
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

fn need<'t>(w: &'t Option<Tensor>, layer: usize, what: &str) -> Result<&'t Tensor> {
    w.as_ref()
        .ok_or_else(|| Error::config(format!("layer {layer} is missing weight {what}")))
}

fn project_q(cfg: &AttnConfig, lw: &LayerWeights, layer: usize, h: &Tensor) -> Result<Tensor> {
    if cfg.q_lora_rank.is_some() {
        let down = ops::matmul(h, need(&lw.w_q_a, layer, "w_q_a")?)?;
        let normed = ops::rmsnorm(&down, need(&lw.q_gain, layer, "q_gain")?, cfg.norm_eps)?;
        ops::matmul(&normed, need(&lw.w_q_b, layer, "w_q_b")?)
    } else {
        ops::matmul(h, need(&lw.w_q, layer, "w_q")?)
    }
}

/// Scaled causal attention over per-head slices, shared by all variants.
/// `k_rope`, when present, is a single `[total x rope_dim]` stream
/// appended (broadcast) to every head's keys.
#[allow(clippy::too_many_arguments)]
fn attend(
    cfg: &AttnConfig,
    q: &Tensor,
    q_rope: Option<&Tensor>,
    k: &Tensor,
    k_rope: Option<&Tensor>,
    v: &Tensor,
    kv_groups: usize,
    lw: &LayerWeights,
    layer: usize,
) -> Result<Tensor> {
    let s = q.rows();
    let total = k.rows();
    let dh = cfg.head_dim;
    let dr = cfg.rope_dim;
    let mask = ops::causal_mask(s, total)?;
    let scale = cfg.attn_scale();
    let heads_per_group = cfg.n_heads / kv_groups;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let group = i / heads_per_group;
        let mut qi = ops::slice_cols(q, i * dh, dh)?;
        let mut ki = ops::slice_cols(k, group * dh, dh)?;
        if let (Some(qr), Some(kr)) = (q_rope, k_rope) {
            qi = ops::concat_cols(&[&qi, &ops::slice_cols(qr, i * dr, dr)?])?;
            ki = ops::concat_cols(&[&ki, kr])?;
        }
        let vi = ops::slice_cols(v, group * dh, dh)?;
        let scores = ops::scale(&ops::matmul_nt(&qi, &ki)?, scale)?;
        let probs = ops::softmax_rows(&ops::add(&scores, &mask)?)?;
        heads.push(ops::matmul(&probs, &vi)?);
    }
    let merged = ops::concat_cols(&heads.iter().collect::<Vec<_>>())?;
    ops::matmul(&merged, need(&lw.w_o, layer, "w_o")?)
}

fn check_total(layer: usize, total: usize, expect: usize) -> Result<()> {
    if total != expect {
        return Err(Error::cache(format!(
            "layer {layer} sees {total} cached tokens, expected {expect}; \
             run producer layers before their consumers within each step"
        )));
    }
    Ok(())
}

fn forward_kv(
    cfg: &AttnConfig,
    weights: &AttnWeights,
    layer: usize,
    h: &Tensor,
    cache: &mut KVCache,
) -> Result<Tensor> {
    let s = h.rows();
    let offset = cache.tokens(layer)?;
    let lw = &weights.layers[layer];
    if cfg.is_producer(layer) {
        if cfg.share_hidden_states {
            cache.append_hidden(layer, h.clone())?;
        } else {
            let k = ops::matmul(h, need(&lw.w_k, layer, "w_k")?)?;
            let v = ops::matmul(h, need(&lw.w_v, layer, "w_v")?)?;
            cache.append_kv(layer, k, v)?;
        }
    }
    let (k_all, v_all) = if cfg.share_hidden_states {
        let hidden = cache.read_hidden(layer)?;
        (
            ops::matmul(&hidden, need(&lw.w_k, layer, "w_k")?)?,
            ops::matmul(&hidden, need(&lw.w_v, layer, "w_v")?)?,
        )
    } else {
        cache.read_kv(layer)?
    };
    check_total(layer, k_all.rows(), offset + s)?;
    let q = project_q(cfg, lw, layer, h)?;
    let out = attend(cfg, &q, None, &k_all, None, &v_all, cfg.kv_heads(), lw, layer)?;
    cache.advance(layer, s)?;
    Ok(out)
}

/// Rebuild K/V rows from cached latent rows the way `layer` does during a
/// forward pass: with the projections of whichever layer owns them (the
/// layer itself, or its group's producer when projections are shared).
fn latent_kv(
    cfg: &AttnConfig,
    weights: &AttnWeights,
    layer: usize,
    c_all: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let owner = if cfg.owns_kv_proj(layer) { layer } else { layer_source(layer, cfg.f()) };
    let lw = &weights.layers[owner];
    let k = ops::matmul(c_all, need(&lw.w_k, owner, "w_k")?)?;
    let v = ops::matmul(c_all, need(&lw.w_v, owner, "w_v")?)?;
    Ok((k, v))
}

/// The K/V a latent-variant layer would reconstruct from the cache right
/// now, without changing any state. This exposes how the sharing modes
/// differ: layers with shared projections rebuild identical K/V from the
/// shared latent, while layers with their own projections rebuild
/// different K/V from the very same cached rows.
pub fn reconstructed_kv(
    cfg: &AttnConfig,
    weights: &AttnWeights,
    layer: usize,
    cache: &KVCache,
) -> Result<(Tensor, Tensor)> {
    if !cfg.variant.is_latent() {
        return Err(Error::config(format!(
            "reconstructed_kv applies to latent variants, not {}",
            cfg.variant
        )));
    }
    let c_all = cache.read_latent(layer)?;
    latent_kv(cfg, weights, layer, &c_all)
}

fn forward_latent(
    cfg: &AttnConfig,
    weights: &AttnWeights,
    layer: usize,
    h: &Tensor,
    cache: &mut KVCache,
) -> Result<Tensor> {
    let s = h.rows();
    let offset = cache.tokens(layer)?;
    let positions: Vec<usize> = (offset..offset + s).collect();
    let lw = &weights.layers[layer];
    if cfg.is_producer(layer) {
        let c_raw = ops::matmul(h, need(&lw.w_c, layer, "w_c")?)?;
        let c_norm = ops::rmsnorm(&c_raw, need(&lw.c_gain, layer, "c_gain")?, cfg.norm_eps)?;
        cache.append_latent(layer, &c_norm)?;
    }
    let c_all = cache.read_latent(layer)?;
    check_total(layer, c_all.rows(), offset + s)?;

    let k_rope = if cfg.rope_dim > 0 {
        if cfg.owns_krope(layer) {
            let raw = ops::matmul(h, need(&lw.w_k_rope, layer, "w_k_rope")?)?;
            let rotated = ops::rope_apply(&raw, &positions, cfg.rope_base)?;
            cache.append_krope(layer, rotated)?;
        }
        let kr = cache.read_krope(layer)?;
        check_total(layer, kr.rows(), offset + s)?;
        Some(kr)
    } else {
        None
    };

    let (k_nope, v_all) = latent_kv(cfg, weights, layer, &c_all)?;

    let q = project_q(cfg, lw, layer, h)?;
    let q_rope = if cfg.rope_dim > 0 {
        let raw = ops::matmul(h, need(&lw.w_q_rope, layer, "w_q_rope")?)?;
        Some(ops::rope_apply_blocks(&raw, &positions, cfg.rope_base, cfg.rope_dim)?)
    } else {
        None
    };

    let out = attend(
        cfg,
        &q,
        q_rope.as_ref(),
        &k_nope,
        k_rope.as_ref(),
        &v_all,
        cfg.n_heads,
        lw,
        layer,
    )?;
    cache.advance(layer, s)?;
    Ok(out)
}

/// Run one attention layer over a block of hidden states `h`
/// (`[s x d_model]`, `s >= 1`), appending this block's cache rows and
/// attending over everything cached so far plus the block itself.
pub fn attn_forward(
    cfg: &AttnConfig,
    weights: &AttnWeights,
    layer: usize,
    h: &Tensor,
    cache: &mut KVCache,
) -> Result<Tensor> {
    if layer >= cfg.n_layers {
        return Err(Error::config(format!(
            "layer {layer} out of range for {} layers",
            cfg.n_layers
        )));
    }
    if h.cols() != cfg.d_model {
        return Err(Error::shape(
            "attn_forward",
            format!("hidden width {} but d_model {}", h.cols(), cfg.d_model),
        ));
    }
    if cache.config() != cfg {
        return Err(Error::cache("cache was built for a different config".to_string()));
    }
    if cfg.variant.is_latent() {
        forward_latent(cfg, weights, layer, h, cache)
    } else {
        forward_kv(cfg, weights, layer, h, cache)
    }
}
