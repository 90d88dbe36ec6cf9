//! Cache serialization: a small, versioned, little-endian format.
//!
//! Layout:
//!
//! ```text
//! magic "KVLC" | u32 version | u32 config_len | config JSON |
//! sha256(config JSON) | u32 n_layers |
//! per layer:
//!   u64 tokens
//!   per part [k, v, hidden, latent, krope]:
//!     u8 present
//!     u64 rows (if present)
//!     latent: u8 packed; packed -> u32 row_bytes + raw bytes,
//!             plain  -> rows * width f64 LE
//!     others: rows * width f64 LE
//! ```
//!
//! Quantized latents serialize their canonical packed codes and scales —
//! not the dequantized working copies — so the round trip is bit-exact by
//! construction: deserializing rebuilds the working copies by dequantizing
//! the very same bytes.

use sha2::{Digest, Sha256};

use super::{KVCache, LatentStore, RowStore, Slot};
use crate::attention::AttnConfig;
use crate::error::{Error, Result};
use crate::quant::QuantizedRow;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KVLC";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_rows(out: &mut Vec<u8>, store: &RowStore) {
    put_u64(out, store.rows as u64);
    for chunk in &store.chunks {
        for v in chunk.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize a cache to bytes.
pub fn serialize_cache(cache: &KVCache) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_vec(cache.config())
        .map_err(|e| Error::format(format!("config encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, cfg_json.len() as u32);
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&Sha256::digest(&cfg_json));
    put_u32(&mut out, cache.slots.len() as u32);
    for (layer, slot) in cache.slots.iter().enumerate() {
        put_u64(&mut out, cache.tokens[layer] as u64);
        for part in [&slot.k, &slot.v, &slot.hidden] {
            match part {
                Some(store) => {
                    out.push(1);
                    put_rows(&mut out, store);
                }
                None => out.push(0),
            }
        }
        match &slot.latent {
            Some(ls) => {
                out.push(1);
                put_u64(&mut out, ls.store.rows as u64);
                match &ls.packed {
                    Some(packed) => {
                        out.push(1);
                        put_u32(&mut out, ls.row_bytes as u32);
                        out.extend_from_slice(packed);
                    }
                    None => {
                        out.push(0);
                        for chunk in &ls.store.chunks {
                            for v in chunk.data() {
                                out.extend_from_slice(&v.to_le_bytes());
                            }
                        }
                    }
                }
            }
            None => out.push(0),
        }
        match &slot.krope {
            Some(store) => {
                out.push(1);
                put_rows(&mut out, store);
            }
            None => out.push(0),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(format!(
                "truncated cache: wanted {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_rows(&mut self, rows: usize, width: usize) -> Result<Tensor> {
        let raw = self.take(rows * width * 8)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_vec(rows, width, data)
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn read_store(cur: &mut Cursor, width: usize) -> Result<RowStore> {
    let rows = cur.u64()? as usize;
    let mut store = RowStore::new(width);
    if rows > 0 {
        store.append("load", cur.f64_rows(rows, width)?)?;
    }
    Ok(store)
}

/// Deserialize a cache. Fails with a format error on a bad magic, an
/// unsupported version, a config digest mismatch, truncation, or slots
/// inconsistent with the embedded config.
pub fn deserialize_cache(bytes: &[u8]) -> Result<KVCache> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("bad magic: not a cache file".to_string()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported cache version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = cur.u32()? as usize;
    let cfg_json = cur.take(cfg_len)?;
    let digest = cur.take(32)?;
    if Sha256::digest(cfg_json).as_slice() != digest {
        return Err(Error::format("config digest mismatch".to_string()));
    }
    let cfg: AttnConfig = serde_json::from_slice(cfg_json)
        .map_err(|e| Error::format(format!("config decode: {e}")))?;
    cfg.validate()?;
    let n_layers = cur.u32()? as usize;
    if n_layers != cfg.n_layers {
        return Err(Error::format(format!(
            "layer count {n_layers} does not match config ({})",
            cfg.n_layers
        )));
    }
    // Build the empty layout first; reading then fills exactly the slots
    // the layout owns.
    let template = KVCache::new(&cfg)?;
    let mut tokens = Vec::with_capacity(n_layers);
    let mut slots = Vec::with_capacity(n_layers);
    for (layer, proto) in template.slots.iter().enumerate() {
        tokens.push(cur.u64()? as usize);
        let mut slot = Slot::default();
        let kv_width = cfg.kv_heads() * cfg.head_dim;
        for (name, expected, width, dst) in [
            ("k", proto.k.is_some(), kv_width, &mut slot.k),
            ("v", proto.v.is_some(), kv_width, &mut slot.v),
            ("hidden", proto.hidden.is_some(), cfg.d_model, &mut slot.hidden),
        ] {
            let present = cur.u8()? == 1;
            if present != expected {
                return Err(Error::format(format!(
                    "layer {layer}: part {name} presence does not match the config layout"
                )));
            }
            if present {
                *dst = Some(read_store(&mut cur, width)?);
            }
        }
        let latent_present = cur.u8()? == 1;
        if latent_present != template.slots[layer].latent.is_some() {
            return Err(Error::format(format!(
                "layer {layer}: latent presence does not match the config layout"
            )));
        }
        if latent_present {
            let rows = cur.u64()? as usize;
            let packed_flag = cur.u8()? == 1;
            if packed_flag != cfg.quant.is_some() {
                return Err(Error::format(format!(
                    "layer {layer}: latent packing does not match the config"
                )));
            }
            let mut store = RowStore::new(cfg.latent_dim);
            let mut packed = None;
            let mut row_bytes = 0usize;
            if let Some(qc) = &cfg.quant {
                row_bytes = cur.u32()? as usize;
                if row_bytes != qc.packed_row_bytes(cfg.latent_dim) {
                    return Err(Error::format(format!(
                        "layer {layer}: packed row stride {row_bytes} does not match the config"
                    )));
                }
                let raw = cur.take(rows * row_bytes)?.to_vec();
                if rows > 0 {
                    let mut data = Vec::with_capacity(rows * cfg.latent_dim);
                    for r in 0..rows {
                        let q = QuantizedRow::unpack(
                            &raw[r * row_bytes..(r + 1) * row_bytes],
                            qc,
                            cfg.latent_dim,
                        )?;
                        data.extend(crate::quant::dequantize(&q));
                    }
                    store.append("load", Tensor::from_vec(rows, cfg.latent_dim, data)?)?;
                }
                packed = Some(raw);
            } else if rows > 0 {
                store.append("load", cur.f64_rows(rows, cfg.latent_dim)?)?;
            }
            slot.latent = Some(LatentStore { store, packed, row_bytes });
        }
        let krope_present = cur.u8()? == 1;
        if krope_present != template.slots[layer].krope.is_some() {
            return Err(Error::format(format!(
                "layer {layer}: krope presence does not match the config layout"
            )));
        }
        if krope_present {
            slot.krope = Some(read_store(&mut cur, cfg.rope_dim)?);
        }
        slots.push(slot);
    }
    if !cur.done() {
        return Err(Error::format(format!(
            "trailing bytes after cache payload (offset {})",
            cur.at
        )));
    }
    Ok(KVCache { cfg, tokens, slots })
}
