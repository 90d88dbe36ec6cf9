//! Decoder-only toy transformer over the attention variant family.
//!
//! Blocks are pre-norm residual: `h += Attn(RMSNorm(h))` then
//! `h += SwiGLU(RMSNorm(h))`. The unembedding is tied to the embedding
//! table by default. Parameter counts are closed-form so configs for
//! different attention variants can be balanced to the same total by
//! adjusting the FFN width alone.

pub mod checkpoint;
pub mod corpus;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::forward::attn_forward;
use crate::attention::weights::{glorot, AttnWeights};
use crate::attention::AttnConfig;
use crate::cache::KVCache;
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

fn default_true() -> bool {
    true
}

/// Full model geometry: attention stack plus FFN width and vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub attn: AttnConfig,
    /// SwiGLU inner width.
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    /// Reuse the embedding table as the unembedding projection.
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    /// Weight initialization seed.
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.ffn_hidden == 0 {
            return Err(Error::config("ffn_hidden must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.attn.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.attn.d_model
    }

    /// Total scalar parameters, computable before any allocation.
    pub fn param_count(&self) -> u64 {
        let d = self.attn.d_model as u64;
        let l = self.attn.n_layers as u64;
        let v = self.vocab_size as u64;
        let f = self.ffn_hidden as u64;
        let embed = v * d;
        let attn = AttnWeights::param_count(&self.attn);
        // Per block: two norm gains + gate/up (d x f) + down (f x d).
        let blocks = l * (2 * d + 3 * d * f);
        let final_gain = d;
        let unembed = if self.tie_embeddings { 0 } else { d * v };
        embed + attn + blocks + final_gain + unembed
    }

    /// Parameters with the FFN contribution removed (the part `ffn_hidden`
    /// cannot change).
    fn param_floor(&self) -> u64 {
        self.param_count() - self.ffn_units() * self.ffn_hidden as u64
    }

    /// Parameters added per unit of `ffn_hidden`.
    fn ffn_units(&self) -> u64 {
        3 * self.attn.d_model as u64 * self.attn.n_layers as u64
    }

    /// Pick the `ffn_hidden` that brings the total parameter count closest
    /// to `target`, leaving everything else unchanged. The result is within
    /// half an FFN-row granularity (`3 * d_model * n_layers` scalars) of the
    /// target whenever the target is reachable.
    pub fn balance_ffn(&self, target: u64) -> Result<ModelConfig> {
        self.validate()?;
        let floor = self.param_floor();
        let unit = self.ffn_units();
        if target < floor + unit {
            return Err(Error::config(format!(
                "target of {target} parameters is below the attention+embedding floor \
                 of {floor} plus one FFN unit of {unit}"
            )));
        }
        let ffn = (((target - floor) as f64 / unit as f64).round() as u64).max(1);
        let mut out = self.clone();
        out.ffn_hidden = ffn as usize;
        Ok(out)
    }
}

/// Per-block weights outside the attention stack.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    /// Norm gain ahead of attention `[1 x d_model]`.
    pub attn_gain: Tensor,
    /// Norm gain ahead of the FFN `[1 x d_model]`.
    pub ffn_gain: Tensor,
    /// SwiGLU gate projection `[d_model x ffn_hidden]`.
    pub w_gate: Tensor,
    /// SwiGLU up projection `[d_model x ffn_hidden]`.
    pub w_up: Tensor,
    /// SwiGLU down projection `[ffn_hidden x d_model]`.
    pub w_down: Tensor,
}

/// A fully-assembled model: embedding, attention stack, FFN blocks,
/// final norm, and (optionally untied) unembedding. Cloning is cheap:
/// parameter tensors are shared handles.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    /// Token embedding table `[vocab_size x d_model]`.
    pub embed: Tensor,
    pub attn: AttnWeights,
    pub blocks: Vec<BlockWeights>,
    /// Final norm gain `[1 x d_model]`.
    pub final_gain: Tensor,
    /// Untied unembedding `[d_model x vocab_size]`; `None` when tied.
    pub unembed: Option<Tensor>,
}

fn ones_param(cols: usize) -> Result<Tensor> {
    Tensor::param_from_vec(1, cols, vec![1.0; cols])
}

impl Model {
    /// Initialize all weights from one seeded stream. The draw order is
    /// fixed (embedding, attention stack, blocks, unembedding), so two
    /// configs whose attention stacks describe the same computation yield
    /// bit-identical models from the same seed.
    pub fn init(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let d = cfg.attn.d_model;
        let f = cfg.ffn_hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let embed = glorot(&mut rng, cfg.vocab_size, d)?;
        let attn = AttnWeights::init_with_rng(&cfg.attn, &mut rng)?;
        let mut blocks = Vec::with_capacity(cfg.attn.n_layers);
        for _ in 0..cfg.attn.n_layers {
            blocks.push(BlockWeights {
                attn_gain: ones_param(d)?,
                ffn_gain: ones_param(d)?,
                w_gate: glorot(&mut rng, d, f)?,
                w_up: glorot(&mut rng, d, f)?,
                w_down: glorot(&mut rng, f, d)?,
            });
        }
        let final_gain = ones_param(d)?;
        let unembed = if cfg.tie_embeddings {
            None
        } else {
            Some(glorot(&mut rng, d, cfg.vocab_size)?)
        };
        Ok(Model { cfg: cfg.clone(), embed, attn, blocks, final_gain, unembed })
    }

    /// All parameters in a fixed order, named for checkpointing.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("embed".to_string(), self.embed.clone())];
        out.extend(self.attn.named_params());
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{i}.attn_gain"), b.attn_gain.clone()));
            out.push((format!("block.{i}.ffn_gain"), b.ffn_gain.clone()));
            out.push((format!("block.{i}.w_gate"), b.w_gate.clone()));
            out.push((format!("block.{i}.w_up"), b.w_up.clone()));
            out.push((format!("block.{i}.w_down"), b.w_down.clone()));
        }
        out.push(("final_gain".to_string(), self.final_gain.clone()));
        if let Some(u) = &self.unembed {
            out.push(("unembed".to_string(), u.clone()));
        }
        out
    }

    /// Parameter handles in the same order as [`Model::named_params`].
    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Total scalars actually allocated (must equal the closed form).
    pub fn allocated_params(&self) -> u64 {
        self.params().iter().map(|t| t.numel() as u64).sum()
    }

    /// Swap in new parameter tensors, in [`Model::named_params`] order.
    pub fn replace_params(&mut self, new: &mut impl Iterator<Item = Tensor>) {
        self.embed = new.next().expect("parameter stream too short");
        self.attn.replace_params(new);
        let mut take = || new.next().expect("parameter stream too short");
        for b in &mut self.blocks {
            b.attn_gain = take();
            b.ffn_gain = take();
            b.w_gate = take();
            b.w_up = take();
            b.w_down = take();
        }
        self.final_gain = take();
        if self.unembed.is_some() {
            self.unembed = Some(take());
        }
    }

    /// A copy whose parameters share storage but carry no gradient
    /// tracking — use for evaluation and decoding.
    pub fn detach(&self) -> Model {
        Model {
            cfg: self.cfg.clone(),
            embed: self.embed.detach(),
            attn: self.attn.detach(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    attn_gain: b.attn_gain.detach(),
                    ffn_gain: b.ffn_gain.detach(),
                    w_gate: b.w_gate.detach(),
                    w_up: b.w_up.detach(),
                    w_down: b.w_down.detach(),
                })
                .collect(),
            final_gain: self.final_gain.detach(),
            unembed: self.unembed.as_ref().map(|u| u.detach()),
        }
    }

    /// One pre-norm residual block: attention then SwiGLU FFN.
    pub fn block_forward(&self, layer: usize, h: &Tensor, cache: &mut KVCache) -> Result<Tensor> {
        let b = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::config(format!("block_forward: no layer {layer}")))?;
        let eps = self.cfg.attn.norm_eps;
        let x = ops::rmsnorm(h, &b.attn_gain, eps)?;
        let a = attn_forward(&self.cfg.attn, &self.attn, layer, &x, cache)?;
        let h = ops::add(h, &a)?;
        let x = ops::rmsnorm(&h, &b.ffn_gain, eps)?;
        let gate = ops::silu(&ops::matmul(&x, &b.w_gate)?)?;
        let up = ops::matmul(&x, &b.w_up)?;
        let ffn = ops::matmul(&ops::mul(&gate, &up)?, &b.w_down)?;
        ops::add(&h, &ffn)
    }

    /// Run `ids` through the stack, appending to `cache`, and return
    /// next-token logits (one row per input token).
    pub fn forward(&self, ids: &[usize], cache: &mut KVCache) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::config("forward: empty token slice"));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::config(format!(
                "forward: token {bad} out of vocabulary range 0..{}",
                self.cfg.vocab_size
            )));
        }
        let mut h = ops::embedding(&self.embed, ids)?;
        for layer in 0..self.cfg.attn.n_layers {
            h = self.block_forward(layer, &h, cache)?;
        }
        let x = ops::rmsnorm(&h, &self.final_gain, self.cfg.attn.norm_eps)?;
        match &self.unembed {
            Some(u) => ops::matmul(&x, u),
            None => ops::matmul_nt(&x, &self.embed),
        }
    }

    /// Mean next-token cross-entropy over one window: inputs are
    /// `window[..n-1]`, targets are `window[1..]`.
    pub fn loss_on_window(&self, window: &[usize], cache: &mut KVCache) -> Result<Tensor> {
        if window.len() < 2 {
            return Err(Error::config("loss_on_window: need at least two tokens"));
        }
        let logits = self.forward(&window[..window.len() - 1], cache)?;
        ops::cross_entropy(&logits, &window[1..])
    }

    /// Greedy (argmax) incremental decode: feed `prompt`, then generate
    /// `steps` tokens one at a time through a fresh cache.
    pub fn greedy_decode(&self, prompt: &[usize], steps: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::config("greedy_decode: empty prompt"));
        }
        let m = self.detach();
        let mut cache = KVCache::new(&m.cfg.attn)?;
        let mut out = Vec::with_capacity(steps);
        let logits = m.forward(prompt, &mut cache)?;
        let mut next = logits.argmax_row(logits.rows() - 1);
        for _ in 0..steps {
            out.push(next);
            let logits = m.forward(&[next], &mut cache)?;
            next = logits.argmax_row(0);
        }
        Ok(out)
    }
}
