//! `kvlab`: the command-line surface of the KV-cache compression lab.
//!
//! Verbs:
//! - `train`: train one model from a config file; writes a checkpoint,
//!   a per-step log, and the held-out perplexity.
//! - `eval-ppl`: score a checkpoint on the config's held-out stream.
//! - `bench-cache`: print cache-size tables for the standard methods at
//!   a chosen geometry, under either or both accounting modes.
//! - `compare-methods`: train every configured method identically (at
//!   balanced parameter counts) and print a comparison report.
//! - `grad-check`: finite-difference checks of every differentiable op
//!   and every attention variant, plus a harness self-test.
//!
//! Exit codes: 0 success, 1 config or usage error, 2 internal numeric or
//! validation failure.

mod cmd_bench;
mod cmd_compare;
mod cmd_eval;
mod cmd_gradcheck;
mod cmd_train;
mod config;
mod table;

use clap::{Parser, Subcommand};

/// A failed run, classified for the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad config, flags, or input files: exit 1.
    Usage(String),
    /// A numeric or internal validation failure: exit 2.
    Internal(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Failure {
        Failure::Usage(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Failure {
        Failure::Internal(msg.into())
    }

    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

impl From<kvlab_core::Error> for Failure {
    fn from(e: kvlab_core::Error) -> Failure {
        use kvlab_core::Error;
        match e {
            Error::Config(_) | Error::Format(_) | Error::Io(_) => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "kvlab",
    version,
    about = "Desk-scale lab for KV-cache-compressing attention (MHA/GQA/MLA/CLLA)"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file; writes checkpoint, log, and eval
    Train(cmd_train::TrainArgs),
    /// Evaluate a checkpoint's perplexity on the held-out stream
    EvalPpl(cmd_eval::EvalArgs),
    /// Print cache-size tables for the standard methods
    BenchCache(cmd_bench::BenchArgs),
    /// Train all configured methods identically and compare them
    CompareMethods(cmd_compare::CompareArgs),
    /// Finite-difference checks of ops and attention variants
    GradCheck(cmd_gradcheck::GradCheckArgs),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive as "errors" but exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train::run(&args),
        Cmd::EvalPpl(args) => cmd_eval::run(&args),
        Cmd::BenchCache(args) => cmd_bench::run(&args),
        Cmd::CompareMethods(args) => cmd_compare::run(&args),
        Cmd::GradCheck(args) => cmd_gradcheck::run(&args),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}
