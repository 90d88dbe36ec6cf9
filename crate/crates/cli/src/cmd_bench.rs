//! `kvlab bench-cache`: cache-size tables for the standard method set
//! (MHA, GQA, MLA, CLLA, CLLA-INT4) at a chosen geometry.

use clap::{Args, ValueEnum};

use kvlab_core::cache::memory::{
    build_reports, render_table, render_tsv, standard_methods, AccountingMode, StandardGeometry,
};

use crate::config::ReportFormat;
use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Headline convention: fp16 K/V, scalar-count latents, code bits only
    Convention,
    /// True bytes: fp16 scalars, code bits plus scales plus rotary stream
    Principled,
    /// Print both modes
    Both,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
    /// Layers (totals multiply by this)
    #[arg(long, default_value_t = 32)]
    pub n_layers: usize,
    /// Query heads
    #[arg(long, default_value_t = 16)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 96)]
    pub head_dim: usize,
    /// KV head groups for the GQA row
    #[arg(long, default_value_t = 8)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 512)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub rope_dim: usize,
    /// Cross-layer sharing factor for the CLLA rows
    #[arg(long, default_value_t = 2)]
    pub sharing_factor: usize,
    /// Code width for the quantized row
    #[arg(long, default_value_t = 4)]
    pub bits: u8,
    /// Scale group size for the quantized row
    #[arg(long, default_value_t = 32)]
    pub group_size: usize,
    /// Sequence length (totals multiply by this)
    #[arg(long, default_value_t = 1)]
    pub seq: usize,
    /// Batch size (totals multiply by this)
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

pub fn run(args: &BenchArgs) -> Result<(), Failure> {
    if args.seq == 0 || args.batch == 0 {
        return Err(Failure::usage("--seq and --batch must be positive"));
    }
    let geometry = StandardGeometry {
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        head_dim: args.head_dim,
        kv_heads: args.kv_heads,
        latent_dim: args.latent_dim,
        rope_dim: args.rope_dim,
        sharing_factor: args.sharing_factor,
        bits: args.bits,
        group_size: args.group_size,
    };
    let methods = standard_methods(&geometry)?;
    let modes: &[AccountingMode] = match args.mode {
        ModeArg::Convention => &[AccountingMode::Convention],
        ModeArg::Principled => &[AccountingMode::Principled],
        ModeArg::Both => &[AccountingMode::Convention, AccountingMode::Principled],
    };
    if args.format == ReportFormat::Table {
        println!(
            "geometry: {} heads x {}, {} kv groups, latent {} + rope {}, F={}, int{} codes /{}, {} layers, seq {}, batch {}",
            geometry.n_heads,
            geometry.head_dim,
            geometry.kv_heads,
            geometry.latent_dim,
            geometry.rope_dim,
            geometry.sharing_factor,
            geometry.bits,
            geometry.group_size,
            geometry.n_layers,
            args.seq,
            args.batch,
        );
        println!();
    }
    for (i, &mode) in modes.iter().enumerate() {
        let reports = build_reports(&methods, mode, args.seq, args.batch);
        match args.format {
            ReportFormat::Table => {
                if i > 0 {
                    println!();
                }
                print!("{}", render_table(&reports, mode));
            }
            ReportFormat::Tsv => {
                println!("# mode: {mode}");
                print!("{}", render_tsv(&reports));
            }
        }
    }
    Ok(())
}
