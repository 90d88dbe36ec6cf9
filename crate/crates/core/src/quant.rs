//! Symmetric sub-channel quantization of cached latent rows.
//!
//! A row is split into groups of `group_size` consecutive elements. Each
//! group gets one scale `S = max|c| / I_max` (computed in `f64`, stored as
//! `f32`) and integer codes `clip(round_half_even(c / S), I_min, I_max)`
//! with the symmetric range `I_min = -I_max = -(2^(bits-1) - 1)`. All-zero
//! groups use `S = eps` so no division ever sees zero; their codes are all
//! zero and dequantize to exact zeros.
//!
//! [`fake_quant`] runs quantize-dequantize as a tape op whose backward is
//! the clipped straight-through estimator: the upstream gradient passes
//! for elements whose scaled value lies inside `[I_min, I_max]` and is
//! zeroed for saturated elements. Saturation can only arise from the `f32`
//! rounding of the scale (a hair below the exact ratio), so in practice it
//! touches at most the group maximum.
//!
//! Packing is canonical and bit-exact: codes as an LSB-first bitstream of
//! `bits`-wide two's-complement fields, then one little-endian `f32` scale
//! per group. Quantize-dequantize is idempotent (requantizing a
//! dequantized row reproduces identical codes and scales), which is what
//! makes cache serialization round-trip bitwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizer settings for the latent cache.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    /// Code width in bits, 2..=16.
    pub bits: u8,
    /// Elements per scale group.
    pub group_size: usize,
    /// Scale used for all-zero groups.
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Replace clipped-STE with identity-STE (pass gradients even for
    /// saturated elements). Ablation knob; off by default.
    #[serde(default)]
    pub identity_ste: bool,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { bits: 4, group_size: 16, eps: default_eps(), identity_ste: false }
    }
}

impl QuantConfig {
    /// Largest representable code magnitude.
    pub fn i_max(&self) -> i32 {
        (1i32 << (self.bits - 1)) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::config(format!("quant bits must be in 2..=16, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::config("quant group_size must be positive".to_string()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config(format!("quant eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Validate against the row width the quantizer will see.
    pub fn validate_for_width(&self, width: usize) -> Result<()> {
        self.validate()?;
        if width == 0 || !width.is_multiple_of(self.group_size) {
            return Err(Error::config(format!(
                "quant group_size {} must divide row width {width}",
                self.group_size
            )));
        }
        Ok(())
    }

    /// Packed bytes for one quantized row of `width` elements
    /// (codes bitstream plus one 4-byte scale per group).
    pub fn packed_row_bytes(&self, width: usize) -> usize {
        let groups = width.div_ceil(self.group_size);
        (width * self.bits as usize).div_ceil(8) + 4 * groups
    }
}

/// One quantized row: integer codes plus per-group scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRow {
    pub bits: u8,
    pub group_size: usize,
    pub codes: Vec<i16>,
    pub scales: Vec<f32>,
}

/// Quantize one row. The trailing group may be shorter when `group_size`
/// does not divide the length (configs validated with
/// [`QuantConfig::validate_for_width`] never hit that case).
pub fn quantize(row: &[f64], cfg: &QuantConfig) -> Result<QuantizedRow> {
    cfg.validate()?;
    if row.is_empty() {
        return Err(Error::shape("quantize", "empty row".to_string()));
    }
    let i_max = cfg.i_max();
    let (lo, hi) = (-(i_max as f64), i_max as f64);
    let mut codes = Vec::with_capacity(row.len());
    let mut scales = Vec::with_capacity(row.len().div_ceil(cfg.group_size));
    for group in row.chunks(cfg.group_size) {
        let max_abs = group.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if max_abs > 0.0 { (max_abs / i_max as f64) as f32 } else { cfg.eps as f32 };
        let s = scale as f64;
        scales.push(scale);
        for &v in group {
            let code = (v / s).round_ties_even().clamp(lo, hi);
            codes.push(code as i16);
        }
    }
    Ok(QuantizedRow { bits: cfg.bits, group_size: cfg.group_size, codes, scales })
}

/// Reconstruct the row: `S * code` per element.
pub fn dequantize(q: &QuantizedRow) -> Vec<f64> {
    q.codes
        .iter()
        .enumerate()
        .map(|(i, &code)| q.scales[i / q.group_size] as f64 * code as f64)
        .collect()
}

impl QuantizedRow {
    /// Canonical little-endian packing: LSB-first bitstream of
    /// `bits`-wide two's-complement codes, then `f32` scales.
    pub fn pack(&self) -> Vec<u8> {
        let bits = self.bits as usize;
        let code_bytes = (self.codes.len() * bits).div_ceil(8);
        let mut out = vec![0u8; code_bytes + 4 * self.scales.len()];
        let mask = (1u32 << bits) - 1;
        let mut bitpos = 0usize;
        for &code in &self.codes {
            let raw = (code as i32 as u32) & mask;
            let byte = bitpos / 8;
            let shift = bitpos % 8;
            // A field spans at most three bytes (bits <= 16, shift <= 7).
            let spread = (raw as u64) << shift;
            out[byte] |= (spread & 0xFF) as u8;
            if spread > 0xFF {
                out[byte + 1] |= ((spread >> 8) & 0xFF) as u8;
            }
            if spread > 0xFFFF {
                out[byte + 2] |= ((spread >> 16) & 0xFF) as u8;
            }
            bitpos += bits;
        }
        for (i, s) in self.scales.iter().enumerate() {
            out[code_bytes + 4 * i..code_bytes + 4 * (i + 1)].copy_from_slice(&s.to_le_bytes());
        }
        out
    }

    /// Inverse of [`QuantizedRow::pack`] for a row of `len` elements.
    pub fn unpack(bytes: &[u8], cfg: &QuantConfig, len: usize) -> Result<QuantizedRow> {
        cfg.validate()?;
        if len == 0 {
            return Err(Error::format("unpack: empty row".to_string()));
        }
        let expected = cfg.packed_row_bytes(len);
        if bytes.len() != expected {
            return Err(Error::format(format!(
                "unpack: got {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let bits = cfg.bits as usize;
        let code_bytes = (len * bits).div_ceil(8);
        let mask = (1u32 << bits) - 1;
        let sign_bit = 1u32 << (bits - 1);
        let mut codes = Vec::with_capacity(len);
        let mut bitpos = 0usize;
        for _ in 0..len {
            let byte = bitpos / 8;
            let shift = bitpos % 8;
            let mut window = bytes[byte] as u64;
            if byte + 1 < code_bytes {
                window |= (bytes[byte + 1] as u64) << 8;
            }
            if byte + 2 < code_bytes {
                window |= (bytes[byte + 2] as u64) << 16;
            }
            let raw = ((window >> shift) as u32) & mask;
            let code = if raw & sign_bit != 0 {
                raw as i32 - (1i32 << bits)
            } else {
                raw as i32
            };
            codes.push(code as i16);
            bitpos += bits;
        }
        let groups = len.div_ceil(cfg.group_size);
        let mut scales = Vec::with_capacity(groups);
        for i in 0..groups {
            let at = code_bytes + 4 * i;
            scales.push(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()));
        }
        Ok(QuantizedRow { bits: cfg.bits, group_size: cfg.group_size, codes, scales })
    }
}

/// Quantize-dequantize each row of `x` as a tape op with straight-through
/// gradients. Also returns the per-row quantized form so callers keeping
/// packed bytes (the cache) quantize exactly once.
pub fn fake_quant_with_rows(
    x: &Tensor,
    cfg: &QuantConfig,
) -> Result<(Tensor, Vec<QuantizedRow>)> {
    cfg.validate_for_width(x.cols())?;
    let (r, c) = x.shape();
    let i_max = cfg.i_max() as f64;
    let mut data = Vec::with_capacity(r * c);
    let mut mask = vec![1.0f64; r * c];
    let mut rows = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let q = quantize(row, cfg)?;
        data.extend(dequantize(&q));
        if !cfg.identity_ste {
            for (j, &v) in row.iter().enumerate() {
                let s = q.scales[j / cfg.group_size] as f64;
                let scaled = v / s;
                if !(-i_max..=i_max).contains(&scaled) {
                    mask[i * c + j] = 0.0;
                }
            }
        }
        rows.push(q);
    }
    let cx = x.clone();
    let out = Tensor::from_op(
        "fake_quant",
        &[x],
        r,
        c,
        data,
        Box::new(move |g| {
            if !cx.requires_grad() {
                return vec![None];
            }
            vec![Some(g.iter().zip(&mask).map(|(gv, m)| gv * m).collect())]
        }),
    )?;
    Ok((out, rows))
}

/// [`fake_quant_with_rows`] without the packed rows.
pub fn fake_quant(x: &Tensor, cfg: &QuantConfig) -> Result<Tensor> {
    Ok(fake_quant_with_rows(x, cfg)?.0)
}
