//! Byte-exact cache size accounting.
//!
//! Two conventions are supported:
//!
//! - [`AccountingMode::Convention`]: the headline convention used when
//!   comparing methods — K/V caches count two bytes per scalar (fp16),
//!   while latent caches count scalars (one byte-unit each), quantized
//!   latents count only code bits, and per-group scales are dropped.
//!   These are the numbers comparison tables are usually quoted in.
//! - [`AccountingMode::Principled`]: everything a decoder must actually
//!   hold per token, at fp16 for unquantized scalars, true code bits for
//!   quantized latents, plus two bytes per quantization scale group and
//!   the rotary key stream.
//!
//! Both report bytes per token per layer; totals multiply by layers,
//! sequence length, and batch.

use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, Variant};

/// Which accounting convention to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    Convention,
    Principled,
}

impl std::fmt::Display for AccountingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AccountingMode::Convention => "convention",
            AccountingMode::Principled => "principled",
        })
    }
}

/// Per-token-per-layer bytes, split by what is stored.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ByteBreakdown {
    /// K/V rows (or 0 for latent variants).
    pub kv: f64,
    /// Cached hidden states (`cla` with `share_hidden_states`).
    pub hidden: f64,
    /// Latent payload (codes when quantized).
    pub latent: f64,
    /// Quantization scales.
    pub scales: f64,
    /// Decoupled rotary key stream.
    pub rope: f64,
}

impl ByteBreakdown {
    pub fn total(&self) -> f64 {
        self.kv + self.hidden + self.latent + self.scales + self.rope
    }
}

const FP16: f64 = 2.0;

/// Bytes per token per layer under `mode`. Cross-layer sharing divides
/// the shared payload by the sharing factor (amortized per layer).
pub fn bytes_per_token_layer(cfg: &AttnConfig, mode: AccountingMode) -> ByteBreakdown {
    let f = cfg.f() as f64;
    let mut b = ByteBreakdown::default();
    if cfg.variant.is_latent() {
        let latent = cfg.latent_dim as f64 / f;
        let rope_share = if cfg.variant == Variant::CllaShareKrope { f } else { 1.0 };
        let rope = cfg.rope_dim as f64 / rope_share;
        match (&cfg.quant, mode) {
            (None, AccountingMode::Convention) => {
                // Scalar-count convention: one byte-unit per cached scalar.
                b.latent = latent;
                b.rope = rope;
            }
            (None, AccountingMode::Principled) => {
                b.latent = latent * FP16;
                b.rope = rope * FP16;
            }
            (Some(q), AccountingMode::Convention) => {
                // Headline quantized figure: code bits only.
                b.latent = latent * q.bits as f64 / 8.0;
            }
            (Some(q), AccountingMode::Principled) => {
                b.latent = latent * q.bits as f64 / 8.0;
                b.scales = (cfg.latent_dim as f64 / q.group_size as f64) * FP16 / f;
                b.rope = rope * FP16;
            }
        }
    } else if cfg.share_hidden_states {
        b.hidden = cfg.d_model as f64 * FP16 / f;
    } else {
        b.kv = 2.0 * cfg.kv_heads() as f64 * cfg.head_dim as f64 * FP16 / f;
    }
    b
}

/// Geometry knobs for the standard five-method size comparison
/// (MHA, GQA, MLA, CLLA, CLLA-INT4). Defaults describe the reference
/// point used throughout: 16 heads of 96, 8 KV groups, a 512-wide latent
/// with a 64-wide rotary stream shared across pairs of layers, and int4
/// codes in groups of 32, over 32 layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandardGeometry {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// KV head groups for the GQA row.
    pub kv_heads: usize,
    pub latent_dim: usize,
    pub rope_dim: usize,
    /// Cross-layer sharing factor for the CLLA rows.
    pub sharing_factor: usize,
    /// Code width for the quantized row.
    pub bits: u8,
    /// Scale group size for the quantized row.
    pub group_size: usize,
}

impl Default for StandardGeometry {
    fn default() -> Self {
        StandardGeometry {
            n_layers: 32,
            n_heads: 16,
            head_dim: 96,
            kv_heads: 8,
            latent_dim: 512,
            rope_dim: 64,
            sharing_factor: 2,
            bits: 4,
            group_size: 32,
        }
    }
}

/// The five standard comparison rows at a given geometry, validated.
pub fn standard_methods(g: &StandardGeometry) -> crate::error::Result<Vec<(String, AttnConfig)>> {
    let base = AttnConfig {
        variant: Variant::Mha,
        n_layers: g.n_layers,
        d_model: g.n_heads * g.head_dim,
        n_heads: g.n_heads,
        head_dim: g.head_dim,
        kv_heads: None,
        latent_dim: 0,
        rope_dim: 0,
        sharing_factor: 1,
        q_lora_rank: None,
        share_hidden_states: false,
        quant: None,
        rope_base: 10000.0,
        norm_eps: 1e-6,
    };
    let mla = AttnConfig {
        variant: Variant::Mla,
        latent_dim: g.latent_dim,
        rope_dim: g.rope_dim,
        ..base.clone()
    };
    let clla = AttnConfig {
        variant: Variant::CllaShareLatent,
        sharing_factor: g.sharing_factor,
        ..mla.clone()
    };
    let methods = vec![
        ("MHA".to_string(), base.clone()),
        (
            "GQA".to_string(),
            AttnConfig { variant: Variant::Gqa, kv_heads: Some(g.kv_heads), ..base },
        ),
        ("MLA".to_string(), mla),
        ("CLLA".to_string(), clla.clone()),
        (
            format!("CLLA-INT{}", g.bits),
            AttnConfig {
                quant: Some(crate::quant::QuantConfig {
                    bits: g.bits,
                    group_size: g.group_size,
                    ..crate::quant::QuantConfig::default()
                }),
                ..clla
            },
        ),
    ];
    for (label, cfg) in &methods {
        cfg.validate().map_err(|e| {
            let msg = match e {
                crate::error::Error::Config(m) => m,
                other => other.to_string(),
            };
            crate::error::Error::config(format!("geometry invalid for {label}: {msg}"))
        })?;
    }
    Ok(methods)
}

/// One line of a size-comparison table.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub label: String,
    pub breakdown: ByteBreakdown,
    pub per_token_layer: f64,
    pub total: f64,
    /// Fraction of the first (baseline) method's size.
    pub ratio: f64,
}

/// Build comparison rows for `(label, config)` pairs. Totals use each
/// config's own layer count times `seq * batch` tokens; ratios are against
/// the first entry.
pub fn build_reports(
    methods: &[(String, AttnConfig)],
    mode: AccountingMode,
    seq: usize,
    batch: usize,
) -> Vec<MethodReport> {
    let mut out = Vec::with_capacity(methods.len());
    let mut baseline = None;
    for (label, cfg) in methods {
        let breakdown = bytes_per_token_layer(cfg, mode);
        let per = breakdown.total();
        let total = per * cfg.n_layers as f64 * seq as f64 * batch as f64;
        let base = *baseline.get_or_insert(per);
        out.push(MethodReport {
            label: label.clone(),
            breakdown,
            per_token_layer: per,
            total,
            ratio: per / base,
        });
    }
    out
}

/// `6144 -> "6,144"`; fractional values keep one decimal.
pub fn fmt_bytes(v: f64) -> String {
    let rounded = v.round();
    if (v - rounded).abs() > 1e-9 {
        return format!("{v:.1}");
    }
    let mut n = rounded.abs() as u64;
    let mut parts = Vec::new();
    loop {
        let part = n % 1000;
        n /= 1000;
        if n == 0 {
            parts.push(part.to_string());
            break;
        }
        parts.push(format!("{part:03}"));
    }
    parts.reverse();
    let joined = parts.join(",");
    if v < 0.0 {
        format!("-{joined}")
    } else {
        joined
    }
}

/// Baseline prints `100%`; everything else gets one decimal.
pub fn fmt_ratio(ratio: f64) -> String {
    if (ratio - 1.0).abs() < 1e-12 {
        "100%".to_string()
    } else {
        format!("{:.1}%", ratio * 100.0)
    }
}

/// Human-readable aligned table.
pub fn render_table(reports: &[MethodReport], mode: AccountingMode) -> String {
    let header = ["method", "bytes/token/layer", "total", "ratio"];
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                fmt_bytes(r.per_token_layer),
                fmt_bytes(r.total),
                fmt_ratio(r.ratio),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = format!("cache size ({mode} accounting)\n");
    let line = |cells: &[String; 4], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let header_cells: [String; 4] = header.map(|h| h.to_string());
    out.push_str(&line(&header_cells, &widths));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row, &widths));
        out.push('\n');
    }
    out
}

/// Tab-separated variant of the same table (machine-friendly).
pub fn render_tsv(reports: &[MethodReport]) -> String {
    let mut out = String::from("method\tbytes_per_token_layer\ttotal\tratio\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.label,
            fmt_bytes(r.per_token_layer),
            fmt_bytes(r.total),
            fmt_ratio(r.ratio)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The default [`StandardGeometry`] rows used throughout size tests.
    pub(crate) fn reference_methods() -> Vec<(String, AttnConfig)> {
        standard_methods(&StandardGeometry::default()).unwrap()
    }

    #[test]
    fn standard_methods_reject_invalid_geometry() {
        let bad = StandardGeometry { rope_dim: 3, ..StandardGeometry::default() };
        assert!(standard_methods(&bad).is_err());
        let bad = StandardGeometry { kv_heads: 5, ..StandardGeometry::default() };
        assert!(standard_methods(&bad).is_err(), "kv_heads must divide n_heads");
        let bad = StandardGeometry { group_size: 31, ..StandardGeometry::default() };
        assert!(standard_methods(&bad).is_err(), "group must divide latent");
    }

    #[test]
    fn convention_mode_reproduces_reference_bytes() {
        let reports =
            build_reports(&reference_methods(), AccountingMode::Convention, 1, 1);
        let bytes: Vec<f64> = reports.iter().map(|r| r.per_token_layer).collect();
        assert_eq!(bytes, vec![6144.0, 3072.0, 576.0, 320.0, 128.0]);
        let ratios: Vec<String> = reports.iter().map(|r| fmt_ratio(r.ratio)).collect();
        assert_eq!(ratios, vec!["100%", "50.0%", "9.4%", "5.2%", "2.1%"]);
    }

    #[test]
    fn principled_mode_counts_everything_and_stays_monotone() {
        let reports =
            build_reports(&reference_methods(), AccountingMode::Principled, 1, 1);
        let bytes: Vec<f64> = reports.iter().map(|r| r.per_token_layer).collect();
        assert_eq!(bytes, vec![6144.0, 3072.0, 1152.0, 640.0, 272.0]);
        for pair in bytes.windows(2) {
            assert!(pair[0] > pair[1], "sizes must strictly decrease: {pair:?}");
        }
        // Quantized breakdown: 128 codes + 16 scales + 128 rope.
        let q = &reports[4].breakdown;
        assert_eq!((q.latent, q.scales, q.rope), (128.0, 16.0, 128.0));
    }

    #[test]
    fn krope_sharing_amortizes_rope_bytes() {
        let methods = reference_methods();
        let clla = methods[3].1.clone();
        let krope = AttnConfig { variant: Variant::CllaShareKrope, ..clla.clone() };
        let a = bytes_per_token_layer(&clla, AccountingMode::Principled);
        let b = bytes_per_token_layer(&krope, AccountingMode::Principled);
        assert_eq!(a.rope, 128.0);
        assert_eq!(b.rope, 64.0);
        assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn share_hidden_counts_hidden_width() {
        let mut cla = reference_methods()[1].1.clone();
        cla.variant = Variant::Cla;
        cla.sharing_factor = 2;
        cla.share_hidden_states = true;
        let b = bytes_per_token_layer(&cla, AccountingMode::Principled);
        assert_eq!(b.hidden, 1536.0);
        assert_eq!(b.kv, 0.0);
    }

    #[test]
    fn totals_scale_with_tokens() {
        let methods = reference_methods();
        let one = build_reports(&methods, AccountingMode::Convention, 1, 1);
        let many = build_reports(&methods, AccountingMode::Convention, 4096, 2);
        for (a, b) in one.iter().zip(&many) {
            assert_eq!(a.total * 4096.0 * 2.0, b.total);
        }
    }

    #[test]
    fn byte_formatting() {
        assert_eq!(fmt_bytes(6144.0), "6,144");
        assert_eq!(fmt_bytes(805306368.0), "805,306,368");
        assert_eq!(fmt_bytes(272.0), "272");
        assert_eq!(fmt_bytes(202.5), "202.5");
        assert_eq!(fmt_ratio(1.0), "100%");
        assert_eq!(fmt_ratio(0.09375), "9.4%");
        assert_eq!(fmt_ratio(0.020833), "2.1%");
    }

    #[test]
    fn table_contains_expected_cells() {
        let reports =
            build_reports(&reference_methods(), AccountingMode::Convention, 1, 1);
        let table = render_table(&reports, AccountingMode::Convention);
        for cell in ["MHA", "6,144", "100%", "CLLA-INT4", "128", "2.1%"] {
            assert!(table.contains(cell), "missing {cell} in:\n{table}");
        }
        let tsv = render_tsv(&reports);
        assert!(tsv.lines().count() == 6);
        assert!(tsv.contains("MLA\t576\t"));
    }
}
