//! `kvlab train`: one full training run from a config file.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;

use kvlab_core::model::checkpoint::save_model;
use kvlab_core::model::corpus::generate;
use kvlab_core::model::train::{eval_ppl, train, StepStats};
use kvlab_core::model::Model;

use crate::config::load_config;
use crate::Failure;

#[derive(Args)]
pub struct TrainArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides [output] dir)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn format_log(stats: &[StepStats]) -> String {
    let mut log = String::from("step\tloss\tlr\tgrad_norm\n");
    for s in stats {
        log.push_str(&format!("{}\t{}\t{}\t{}\n", s.step, s.loss, s.lr, s.grad_norm));
    }
    log
}

pub fn run(args: &TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let out = args
        .out_dir
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .ok_or_else(|| {
            Failure::usage("no output directory: set [output] dir in the config or pass --out-dir")
        })?;
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.display())))?;

    let corpus = generate(&cfg.corpus)?;
    let model = Model::init(&cfg.model)?;
    println!(
        "training {} ({} params, {} layers) for {} steps on {} {} tokens",
        cfg.model.attn.variant,
        cfg.model.param_count(),
        cfg.model.n_layers(),
        cfg.train.steps,
        cfg.corpus.length,
        match cfg.corpus.kind {
            kvlab_core::model::corpus::CorpusKind::Markov2 => "markov2",
            kvlab_core::model::corpus::CorpusKind::Copy => "copy",
        },
    );
    let t0 = Instant::now();
    let (trainer, stats) = train(model, &corpus, &cfg.train)?;
    let train_secs = t0.elapsed().as_secs_f64();

    let log_path = out.join("train_log.tsv");
    std::fs::write(&log_path, format_log(&stats))
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", log_path.display())))?;

    let ckpt_path = out.join("checkpoint.kvcp");
    let ckpt = save_model(&trainer.model)?;
    std::fs::write(&ckpt_path, ckpt)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", ckpt_path.display())))?;

    let holdout = generate(&cfg.holdout_spec())?;
    let ppl = eval_ppl(&trainer.model, &holdout, cfg.eval.seq_len)?;
    let eval_path = out.join("eval.tsv");
    std::fs::write(
        &eval_path,
        format!("val_ppl\tholdout_tokens\tseq_len\n{ppl}\t{}\t{}\n", holdout.len(), cfg.eval.seq_len),
    )
    .map_err(|e| Failure::usage(format!("cannot write {}: {e}", eval_path.display())))?;

    let first = stats.first().expect("at least one step").loss;
    let last = stats.last().expect("at least one step").loss;
    println!("done in {train_secs:.1}s: loss {first:.4} -> {last:.4}");
    println!("val ppl {ppl:.4} over {} held-out tokens", holdout.len());
    println!(
        "wrote {}, {}, {}",
        log_path.display(),
        ckpt_path.display(),
        eval_path.display()
    );
    Ok(())
}
