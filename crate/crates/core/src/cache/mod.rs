//! Incremental-decoding KV cache.
//!
//! One [`KVCache`] holds per-layer slots sized by the attention config.
//! Only producer layers own storage for shared state; consumer layers
//! resolve reads through [`layer_source`](crate::attention::layer_source),
//! so sharing is by indirection — nothing is copied per consumer.
//!
//! Appends push whole tensors as chunks (one chunk per forward call:
//! a full sequence during training, one row per decode step). Reads
//! concatenate the chunks, which keeps appended tensors on the gradient
//! tape during training. With quantization enabled, the cache stores the
//! fake-quantized latent (what consumers compute with) alongside the
//! packed codes and scales (the bytes that would live in memory, and what
//! serialization writes). Both come from a single quantize call per
//! appended row.

pub mod memory;
pub mod wire;

use crate::attention::{layer_source, AttnConfig, Variant};
use crate::error::{Error, Result};
use crate::quant::fake_quant_with_rows;
use crate::tensor::{ops, Tensor};

/// Append-only store of fixed-width rows, kept as tensor chunks.
#[derive(Debug)]
struct RowStore {
    width: usize,
    rows: usize,
    chunks: Vec<Tensor>,
}

impl RowStore {
    fn new(width: usize) -> RowStore {
        RowStore { width, rows: 0, chunks: Vec::new() }
    }

    fn append(&mut self, part: &str, t: Tensor) -> Result<()> {
        if t.cols() != self.width {
            return Err(Error::shape(
                "cache_append",
                format!("{part}: rows of width {}, store width {}", t.cols(), self.width),
            ));
        }
        if t.rows() == 0 {
            return Err(Error::shape("cache_append", format!("{part}: empty append")));
        }
        self.rows += t.rows();
        self.chunks.push(t);
        Ok(())
    }

    fn read(&self, part: &str) -> Result<Tensor> {
        match self.chunks.len() {
            0 => Err(Error::cache(format!("{part}: read from empty store"))),
            1 => Ok(self.chunks[0].clone()),
            _ => ops::concat_rows(&self.chunks.iter().collect::<Vec<_>>()),
        }
    }

    fn payload_bytes(&self) -> u64 {
        (self.rows * self.width * std::mem::size_of::<f64>()) as u64
    }

    fn clear(&mut self) {
        self.rows = 0;
        self.chunks.clear();
    }
}

/// Latent store: fake-quantized tensor chunks plus canonical packed bytes.
#[derive(Debug)]
struct LatentStore {
    store: RowStore,
    /// Packed codes+scales per row, contiguous (`row_bytes` each);
    /// present only when quantization is on.
    packed: Option<Vec<u8>>,
    row_bytes: usize,
}

/// Per-layer storage. `None` parts are not owned by this layer.
#[derive(Debug, Default)]
struct Slot {
    k: Option<RowStore>,
    v: Option<RowStore>,
    hidden: Option<RowStore>,
    latent: Option<LatentStore>,
    krope: Option<RowStore>,
}

/// Measured bytes actually held by a cache, by payload kind.
#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct PayloadBytes {
    pub kv: u64,
    pub hidden: u64,
    /// Unquantized latent rows (f64 working copies).
    pub latent: u64,
    /// Packed quantized latent (codes + scales).
    pub latent_packed: u64,
    pub krope: u64,
}

impl PayloadBytes {
    pub fn total(&self) -> u64 {
        self.kv + self.hidden + self.latent + self.latent_packed + self.krope
    }
}

/// The cache proper.
#[derive(Debug)]
pub struct KVCache {
    cfg: AttnConfig,
    /// Logical tokens processed per layer.
    tokens: Vec<usize>,
    slots: Vec<Slot>,
}

impl KVCache {
    pub fn new(cfg: &AttnConfig) -> Result<KVCache> {
        cfg.validate()?;
        let mut slots = Vec::with_capacity(cfg.n_layers);
        for layer in 0..cfg.n_layers {
            let mut slot = Slot::default();
            if cfg.variant.is_latent() {
                if cfg.is_producer(layer) {
                    let row_bytes = cfg
                        .quant
                        .as_ref()
                        .map(|q| q.packed_row_bytes(cfg.latent_dim))
                        .unwrap_or(0);
                    slot.latent = Some(LatentStore {
                        store: RowStore::new(cfg.latent_dim),
                        packed: cfg.quant.is_some().then(Vec::new),
                        row_bytes,
                    });
                }
                if cfg.owns_krope(layer) {
                    slot.krope = Some(RowStore::new(cfg.rope_dim));
                }
            } else if cfg.is_producer(layer) {
                if cfg.share_hidden_states {
                    slot.hidden = Some(RowStore::new(cfg.d_model));
                } else {
                    let w = cfg.kv_heads() * cfg.head_dim;
                    slot.k = Some(RowStore::new(w));
                    slot.v = Some(RowStore::new(w));
                }
            }
            slots.push(slot);
        }
        Ok(KVCache { cfg: cfg.clone(), tokens: vec![0; cfg.n_layers], slots })
    }

    pub fn config(&self) -> &AttnConfig {
        &self.cfg
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.slots.len() {
            return Err(Error::cache(format!(
                "layer {layer} out of range for {} layers",
                self.slots.len()
            )));
        }
        Ok(())
    }

    /// Logical tokens already processed by `layer` (the next block's
    /// position offset).
    pub fn tokens(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.tokens[layer])
    }

    /// Record that `layer` processed `n` more tokens.
    pub fn advance(&mut self, layer: usize, n: usize) -> Result<()> {
        self.check_layer(layer)?;
        self.tokens[layer] += n;
        Ok(())
    }

    /// All layers have processed the same number of tokens (holds between
    /// full forward passes).
    pub fn aligned(&self) -> bool {
        self.tokens.iter().all(|&t| t == self.tokens[0])
    }

    /// Whether `layer` owns a latent store (true only for producer layers
    /// of latent variants).
    pub fn has_latent_store(&self, layer: usize) -> bool {
        self.slots.get(layer).is_some_and(|s| s.latent.is_some())
    }

    pub fn append_kv(&mut self, layer: usize, k: Tensor, v: Tensor) -> Result<()> {
        self.check_layer(layer)?;
        if k.shape() != v.shape() {
            return Err(Error::shape(
                "cache_append",
                format!("k {:?} vs v {:?}", k.shape(), v.shape()),
            ));
        }
        let slot = &mut self.slots[layer];
        match (&mut slot.k, &mut slot.v) {
            (Some(ks), Some(vs)) => {
                ks.append("k", k)?;
                vs.append("v", v)
            }
            _ => Err(Error::cache(format!(
                "layer {layer} does not own a k/v store (consumer or wrong variant)"
            ))),
        }
    }

    pub fn read_kv(&self, layer: usize) -> Result<(Tensor, Tensor)> {
        self.check_layer(layer)?;
        let src = layer_source(layer, self.cfg.f());
        let slot = &self.slots[src];
        match (&slot.k, &slot.v) {
            (Some(ks), Some(vs)) => Ok((ks.read("k")?, vs.read("v")?)),
            _ => Err(Error::cache(format!("layer {src} holds no k/v store"))),
        }
    }

    pub fn append_hidden(&mut self, layer: usize, h: Tensor) -> Result<()> {
        self.check_layer(layer)?;
        match &mut self.slots[layer].hidden {
            Some(store) => store.append("hidden", h),
            None => Err(Error::cache(format!("layer {layer} does not own a hidden store"))),
        }
    }

    pub fn read_hidden(&self, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        let src = layer_source(layer, self.cfg.f());
        match &self.slots[src].hidden {
            Some(store) => store.read("hidden"),
            None => Err(Error::cache(format!("layer {src} holds no hidden store"))),
        }
    }

    /// Append normalized latent rows to a producer slot. Applies fake
    /// quantization once when configured and returns the tensor consumers
    /// will read (fake-quantized when quantization is on), so the producer
    /// itself computes with exactly the cached values.
    pub fn append_latent(&mut self, layer: usize, c_norm: &Tensor) -> Result<Tensor> {
        self.check_layer(layer)?;
        let quant = self.cfg.quant;
        match &mut self.slots[layer].latent {
            Some(ls) => {
                let stored = match &quant {
                    Some(qc) => {
                        let (fq, rows) = fake_quant_with_rows(c_norm, qc)?;
                        let packed = ls.packed.as_mut().expect("quant slot missing packed store");
                        for row in &rows {
                            packed.extend_from_slice(&row.pack());
                        }
                        fq
                    }
                    None => c_norm.clone(),
                };
                ls.store.append("latent", stored.clone())?;
                Ok(stored)
            }
            None => Err(Error::cache(format!(
                "layer {layer} does not own a latent store (consumer slots share the producer's)"
            ))),
        }
    }

    pub fn read_latent(&self, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        let src = layer_source(layer, self.cfg.f());
        match &self.slots[src].latent {
            Some(ls) => ls.store.read("latent"),
            None => Err(Error::cache(format!("layer {src} holds no latent store"))),
        }
    }

    pub fn append_krope(&mut self, layer: usize, rows: Tensor) -> Result<()> {
        self.check_layer(layer)?;
        match &mut self.slots[layer].krope {
            Some(store) => store.append("krope", rows),
            None => Err(Error::cache(format!("layer {layer} does not own a krope store"))),
        }
    }

    pub fn read_krope(&self, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        let src = match self.cfg.variant {
            Variant::CllaShareKrope => layer_source(layer, self.cfg.f()),
            _ => layer,
        };
        match &self.slots[src].krope {
            Some(store) => store.read("krope"),
            None => Err(Error::cache(format!("layer {src} holds no krope store"))),
        }
    }

    /// Bytes of payload actually allocated, by kind. Working latent copies
    /// count at their stored width (`f64`), packed latent at its true
    /// packed size; sharing shows up directly (consumers hold nothing).
    pub fn payload_bytes(&self) -> PayloadBytes {
        let mut p = PayloadBytes::default();
        for slot in &self.slots {
            if let Some(s) = &slot.k {
                p.kv += s.payload_bytes();
            }
            if let Some(s) = &slot.v {
                p.kv += s.payload_bytes();
            }
            if let Some(s) = &slot.hidden {
                p.hidden += s.payload_bytes();
            }
            if let Some(ls) = &slot.latent {
                p.latent += ls.store.payload_bytes();
                if let Some(packed) = &ls.packed {
                    p.latent_packed += packed.len() as u64;
                }
            }
            if let Some(s) = &slot.krope {
                p.krope += s.payload_bytes();
            }
        }
        p
    }

    /// Drop all cached rows, keeping the layout.
    pub fn reset(&mut self) {
        for t in &mut self.tokens {
            *t = 0;
        }
        for slot in &mut self.slots {
            if let Some(s) = &mut slot.k {
                s.clear();
            }
            if let Some(s) = &mut slot.v {
                s.clear();
            }
            if let Some(s) = &mut slot.hidden {
                s.clear();
            }
            if let Some(ls) = &mut slot.latent {
                ls.store.clear();
                if let Some(p) = &mut ls.packed {
                    p.clear();
                }
            }
            if let Some(s) = &mut slot.krope {
                s.clear();
            }
        }
    }

}
