//! Model checkpoints: a versioned container of length-prefixed, named
//! tensor records plus a config digest.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "KVCP" | u32 version | u32 config_len | config JSON |
//! sha256(config JSON) | u32 n_records |
//! per record: u32 name_len | name | u32 rows | u32 cols | rows*cols f64
//! ```
//!
//! Loading rebuilds the model skeleton from the embedded config and then
//! installs every record by name; a record set that does not exactly
//! cover the model's parameters is a format error. All payloads are raw
//! f64 bytes, so a save/load round trip is bit-exact.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KVCP";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a model (config plus all named parameters) to bytes.
pub fn save_model(model: &Model) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_vec(&model.cfg)
        .map_err(|e| Error::format(format!("config encode: {e}")))?;
    let records = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, cfg_json.len() as u32);
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&Sha256::digest(&cfg_json));
    put_u32(&mut out, records.len() as u32);
    for (name, t) in records {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows() as u32);
        put_u32(&mut out, t.cols() as u32);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
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
                "truncated checkpoint: wanted {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Deserialize a model saved by [`save_model`]. Fails with a format error
/// on bad magic, version or digest mismatch, truncation, or a record set
/// that does not exactly match the config's parameters.
pub fn load_model(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, at: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("bad magic: not a checkpoint file".to_string()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let cfg_len = cur.u32()? as usize;
    let cfg_json = cur.take(cfg_len)?;
    let digest = cur.take(32)?;
    if Sha256::digest(cfg_json).as_slice() != digest {
        return Err(Error::format("config digest mismatch".to_string()));
    }
    let cfg: ModelConfig = serde_json::from_slice(cfg_json)
        .map_err(|e| Error::format(format!("config decode: {e}")))?;

    let n_records = cur.u32()? as usize;
    let mut records: HashMap<String, Tensor> = HashMap::with_capacity(n_records);
    for _ in 0..n_records {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format("record name is not UTF-8".to_string()))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(rows * cols * 8)?;
        let data: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::param_from_vec(rows, cols, data)?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate record '{name}'")));
        }
    }
    if cur.at != cur.bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after last record",
            cur.bytes.len() - cur.at
        )));
    }

    let mut model = Model::init(&cfg)?;
    let mut replacements = Vec::new();
    for (name, template) in model.named_params() {
        let t = records.remove(&name).ok_or_else(|| {
            Error::format(format!("checkpoint is missing parameter '{name}'"))
        })?;
        if t.shape() != template.shape() {
            return Err(Error::format(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                template.shape()
            )));
        }
        replacements.push(t);
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::format(format!("unknown parameter record '{name}'")));
    }
    model.replace_params(&mut replacements.into_iter());
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::cache::KVCache;
    use crate::model::tests::tiny_model_cfg;
    use crate::model::train::eval_ppl;
    use crate::quant::QuantConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfgs = vec![tiny_model_cfg(Variant::Mha), tiny_model_cfg(Variant::CllaShareKvproj)];
        cfgs[1].attn.quant = Some(QuantConfig { bits: 4, group_size: 4, ..QuantConfig::default() });
        cfgs.push({
            let mut c = tiny_model_cfg(Variant::Mla);
            c.tie_embeddings = false;
            c
        });
        for cfg in cfgs {
            let model = Model::init(&cfg).unwrap();
            let bytes = save_model(&model).unwrap();
            let loaded = load_model(&bytes).unwrap();
            assert_eq!(loaded.cfg, cfg);
            let a = model.named_params();
            let b = loaded.named_params();
            assert_eq!(a.len(), b.len());
            for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
                assert_eq!(na, nb);
                assert!(ta.bit_eq(tb), "param {na} changed across round trip");
            }
        }
    }

    #[test]
    fn loaded_model_computes_identically() {
        let cfg = tiny_model_cfg(Variant::CllaShareLatent);
        let model = Model::init(&cfg).unwrap();
        let loaded = load_model(&save_model(&model).unwrap()).unwrap();
        let tokens: Vec<usize> = (0..80).map(|i| (i * 7 + 3) % cfg.vocab_size).collect();
        let a = eval_ppl(&model, &tokens, 8).unwrap();
        let b = eval_ppl(&loaded, &tokens, 8).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());

        let mut ca = KVCache::new(&cfg.attn).unwrap();
        let mut cb = KVCache::new(&cfg.attn).unwrap();
        let la = model.forward(&[1, 2, 3], &mut ca).unwrap();
        let lb = loaded.forward(&[1, 2, 3], &mut cb).unwrap();
        assert!(la.bit_eq(&lb));
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = tiny_model_cfg(Variant::Mha);
        let model = Model::init(&cfg).unwrap();
        let bytes = save_model(&model).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(load_model(&bad).is_err(), "bad magic");

        let mut bad = bytes.clone();
        bad[4] = 99;
        assert!(load_model(&bad).is_err(), "bad version");

        // Flip a byte inside the config JSON: digest mismatch.
        let mut bad = bytes.clone();
        bad[13] ^= 0x01;
        assert!(load_model(&bad).is_err(), "config digest");

        let bad = &bytes[..bytes.len() - 3];
        assert!(load_model(bad).is_err(), "truncation");

        let mut bad = bytes.clone();
        bad.push(0);
        assert!(load_model(&bad).is_err(), "trailing bytes");

        // Rename a record: the set no longer covers the model's parameters.
        let needle = b"final_gain";
        let pos = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("record name present");
        let mut bad = bytes.clone();
        bad[pos] = b'x';
        let err = load_model(&bad).unwrap_err().to_string();
        assert!(err.contains("final_gain") || err.contains("xinal_gain"), "{err}");
    }
}
