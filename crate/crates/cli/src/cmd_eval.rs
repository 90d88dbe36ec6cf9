//! `kvlab eval-ppl`: score a checkpoint on the config's held-out stream.

use std::path::PathBuf;

use clap::Args;

use kvlab_core::model::checkpoint::load_model;
use kvlab_core::model::corpus::generate;
use kvlab_core::model::train::eval_ppl;

use crate::config::load_config;
use crate::Failure;

#[derive(Args)]
pub struct EvalArgs {
    /// Experiment config (TOML); supplies the held-out corpus spec
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint written by `kvlab train`
    #[arg(long)]
    pub checkpoint: PathBuf,
}

pub fn run(args: &EvalArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let bytes = std::fs::read(&args.checkpoint)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", args.checkpoint.display())))?;
    let model = load_model(&bytes)?;
    if model.cfg != cfg.model {
        return Err(Failure::usage(format!(
            "checkpoint {} was trained with a different [model] config than {}",
            args.checkpoint.display(),
            args.config.display()
        )));
    }
    let holdout = generate(&cfg.holdout_spec())?;
    let ppl = eval_ppl(&model, &holdout, cfg.eval.seq_len)?;
    println!(
        "val ppl {ppl} over {} held-out tokens (seq_len {})",
        holdout.len(),
        cfg.eval.seq_len
    );
    Ok(())
}
