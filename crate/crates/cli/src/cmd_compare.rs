//! `kvlab compare-methods`: train every configured method identically at
//! balanced parameter counts, then report training signal, held-out
//! perplexity, and cache bytes under both accounting modes.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use kvlab_core::attention::AttnConfig;
use kvlab_core::cache::memory::{
    build_reports, bytes_per_token_layer, fmt_bytes, render_table, render_tsv, AccountingMode,
};
use kvlab_core::model::corpus::generate;
use kvlab_core::model::train::{eval_ppl, train, StepStats};
use kvlab_core::model::Model;

use crate::config::{load_config, ReportFormat};
use crate::table::render;
use crate::{cmd_train, Failure};

#[derive(Args)]
pub struct CompareArgs {
    /// Experiment config (TOML) with a [compare] section
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides [output] dir); optional
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn geometry_summary(cfg: &AttnConfig) -> String {
    if cfg.variant.is_latent() {
        let quant = cfg
            .quant
            .as_ref()
            .map(|q| format!(" int{}/{}", q.bits, q.group_size))
            .unwrap_or_default();
        format!(
            "{}h x{} C{} R{} F{}{}",
            cfg.n_heads,
            cfg.head_dim,
            cfg.latent_dim,
            cfg.rope_dim,
            cfg.f(),
            quant
        )
    } else {
        format!("{}h x{} kv{} F{}", cfg.n_heads, cfg.head_dim, cfg.kv_heads(), cfg.f())
    }
}

/// Smoothed end-of-run loss: mean over the last tenth of the schedule.
fn final_loss(stats: &[StepStats]) -> f64 {
    let k = (stats.len() / 10).max(1);
    stats[stats.len() - k..].iter().map(|s| s.loss).sum::<f64>() / k as f64
}

pub fn run(args: &CompareArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let compare = cfg
        .compare
        .clone()
        .ok_or_else(|| Failure::usage("[compare] section with a methods list is required"))?;
    let out_dir = args.out_dir.clone().or_else(|| cfg.output.dir.clone());
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
    }

    let corpus = generate(&cfg.corpus)?;
    let holdout = generate(&cfg.holdout_spec())?;

    let mut anchor: Option<u64> = None;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut method_cfgs: Vec<(String, AttnConfig)> = Vec::new();

    for spec in &compare.methods {
        let mut mc = cfg.model.clone();
        mc.attn = spec.attn.clone();
        if let Some(target) = anchor {
            if compare.balance_params {
                mc = mc.balance_ffn(target)?;
            }
        } else {
            anchor = Some(mc.param_count());
        }

        let t0 = Instant::now();
        let model = Model::init(&mc)?;
        let (trainer, stats) = train(model, &corpus, &cfg.train)?;
        let ppl = eval_ppl(&trainer.model, &holdout, cfg.eval.seq_len)?;
        let secs = t0.elapsed().as_secs_f64();

        let first = stats.first().expect("steps >= 1").loss;
        let last = final_loss(&stats);
        println!(
            "trained {:<14} loss {first:.4} -> {last:.4}, val ppl {ppl:.4} ({secs:.1}s)",
            spec.label
        );

        if let Some(dir) = &out_dir {
            let log = dir.join(format!("train_log_{}.tsv", spec.label.replace(' ', "_")));
            std::fs::write(&log, cmd_train::format_log(&stats))
                .map_err(|e| Failure::usage(format!("cannot write {}: {e}", log.display())))?;
        }

        let conv = bytes_per_token_layer(&mc.attn, AccountingMode::Convention).total();
        let prin = bytes_per_token_layer(&mc.attn, AccountingMode::Principled).total();
        rows.push(vec![
            spec.label.clone(),
            mc.attn.variant.to_string(),
            geometry_summary(&mc.attn),
            mc.param_count().to_string(),
            mc.ffn_hidden.to_string(),
            format!("{first:.4}"),
            format!("{last:.4}"),
            format!("{ppl:.4}"),
            fmt_bytes(conv),
            fmt_bytes(prin),
        ]);
        method_cfgs.push((spec.label.clone(), mc.attn.clone()));
    }

    let header = [
        "method",
        "variant",
        "geometry",
        "params",
        "ffn",
        "loss_first",
        "loss_final",
        "val_ppl",
        "bytes/tok/layer (convention)",
        "bytes/tok/layer (principled)",
    ];
    let tsv = cfg.output.format == ReportFormat::Tsv;
    let main_table = render(&header, &rows, tsv);
    println!();
    print!("{main_table}");

    // Memory reports for the same methods, both accounting modes.
    let mut memory_sections = Vec::new();
    for mode in [AccountingMode::Convention, AccountingMode::Principled] {
        let reports = build_reports(&method_cfgs, mode, 1, 1);
        let section = if tsv {
            format!("# mode: {mode}\n{}", render_tsv(&reports))
        } else {
            render_table(&reports, mode)
        };
        println!();
        print!("{section}");
        memory_sections.push((mode, reports));
    }

    if let Some(dir) = &out_dir {
        let path = dir.join("compare.tsv");
        std::fs::write(&path, render(&header, &rows, true))
            .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
        for (mode, reports) in &memory_sections {
            let path = dir.join(format!("memory_{mode}.tsv"));
            std::fs::write(&path, render_tsv(reports))
                .map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))?;
        }
        println!();
        println!("wrote reports to {}", dir.display());
    }
    Ok(())
}
