//! End-to-end checks of the `kvlab` binary: exit codes, config
//! diagnostics, artifact determinism, and report formats.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kvlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvlab")).args(args).output().expect("spawn kvlab")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

/// Fresh scratch directory for one test.
fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kvlab_cli_{name}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// A minimal config that trains in well under a second.
fn tiny_config() -> String {
    r#"
[model]
ffn_hidden = 12
vocab_size = 12
seed = 9

[model.attn]
variant = "clla_share_latent"
n_layers = 2
d_model = 16
n_heads = 2
head_dim = 8
latent_dim = 8
rope_dim = 4
sharing_factor = 2

[corpus]
kind = "markov2"
vocab_size = 12
length = 2000
seed = 4

[train]
steps = 12
batch = 2
seq_len = 16
warmup_steps = 2

[eval]
seq_len = 16
tokens = 256
"#
    .to_string()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"][..], &["train", "--help"][..]] {
        let out = kvlab(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr_of(&out));
    }
}

#[test]
fn bad_invocations_are_usage_errors() {
    for args in [
        &["frobnicate"][..],
        &[][..],
        &["bench-cache", "--mode", "nonsense"][..],
        &["train"][..], // missing --config
    ] {
        let out = kvlab(args);
        assert_eq!(out.status.code(), Some(1), "{args:?} should exit 1");
    }
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = kvlab(&["train", "--config", "/nonexistent/run.toml", "--out-dir", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("cannot read config"), "{}", stderr_of(&out));
}

#[test]
fn unknown_config_key_is_named_in_the_error() {
    let dir = scratch("unknown_key");
    let body = tiny_config().replace("[train]", "[train]\nfnord = 3");
    let path = write_config(&dir, &body);
    let out = kvlab(&["train", "--config", path.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("fnord"), "error must name the unknown key: {err}");
}

#[test]
fn missing_required_key_is_named_in_the_error() {
    let dir = scratch("missing_key");
    let body = tiny_config().replace("vocab_size = 12\nseed = 9", "seed = 9");
    let path = write_config(&dir, &body);
    let out = kvlab(&["train", "--config", path.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("vocab_size"), "error must name the missing key: {err}");
}

#[test]
fn cross_section_validation_catches_vocab_mismatch() {
    let dir = scratch("vocab_mismatch");
    let body = tiny_config().replace("kind = \"markov2\"\nvocab_size = 12", "kind = \"markov2\"\nvocab_size = 13");
    let path = write_config(&dir, &body);
    let out = kvlab(&["train", "--config", path.to_str().unwrap(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("vocab_size") && err.contains("must match"), "{err}");
}

#[test]
fn train_is_deterministic_and_eval_reproduces_its_score() {
    let dir = scratch("train_det");
    let path = write_config(&dir, &tiny_config());
    let (a, b) = (dir.join("a"), dir.join("b"));

    for out_dir in [&a, &b] {
        let out = kvlab(&[
            "train",
            "--config",
            path.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
        assert!(stdout_of(&out).contains("val ppl"), "{}", stdout_of(&out));
    }
    for file in ["train_log.tsv", "checkpoint.kvcp", "eval.tsv"] {
        let x = fs::read(a.join(file)).unwrap();
        let y = fs::read(b.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }

    // eval-ppl on the checkpoint reports the same number train printed.
    let ckpt = a.join("checkpoint.kvcp");
    let out = kvlab(&["eval-ppl", "--config", path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let eval_tsv = fs::read_to_string(a.join("eval.tsv")).unwrap();
    let recorded = eval_tsv.lines().nth(1).unwrap().split('\t').nth(1).unwrap();
    assert!(
        stdout_of(&out).contains(recorded),
        "eval-ppl said {:?} but the training run recorded {recorded}",
        stdout_of(&out)
    );
}

#[test]
fn eval_rejects_a_checkpoint_from_a_different_model() {
    let dir = scratch("eval_mismatch");
    let path = write_config(&dir, &tiny_config());
    let run = dir.join("run");
    let out = kvlab(&["train", "--config", path.to_str().unwrap(), "--out-dir", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let other = write_config(&scratch("eval_mismatch_other"), &tiny_config().replace("ffn_hidden = 12", "ffn_hidden = 16"));
    let ckpt = run.join("checkpoint.kvcp");
    let out = kvlab(&["eval-ppl", "--config", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("different [model] config"), "{}", stderr_of(&out));
}

#[test]
fn corrupted_checkpoint_is_a_usage_error() {
    let dir = scratch("bad_ckpt");
    let path = write_config(&dir, &tiny_config());
    let ckpt = dir.join("checkpoint.kvcp");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let out = kvlab(&["eval-ppl", "--config", path.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
}

#[test]
fn bench_cache_tsv_mode_emits_machine_rows() {
    let out = kvlab(&["bench-cache", "--mode", "both", "--format", "tsv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("# mode: convention"), "{text}");
    assert!(text.contains("# mode: principled"), "{text}");
    assert!(text.contains("MHA\t6,144"), "{text}");
    assert!(text.contains("CLLA-INT4\t272\t"), "{text}");
}

#[test]
fn bench_cache_accepts_custom_geometry() {
    let out = kvlab(&[
        "bench-cache",
        "--mode",
        "convention",
        "--n-heads",
        "8",
        "--head-dim",
        "64",
        "--kv-heads",
        "4",
        "--latent-dim",
        "256",
        "--rope-dim",
        "32",
        "--group-size",
        "16",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    // MHA at 8 heads of 64: 2 * 8 * 64 * 2 = 2,048 bytes per token per layer.
    assert!(stdout_of(&out).contains("2,048"), "{}", stdout_of(&out));

    let out = kvlab(&["bench-cache", "--latent-dim", "100", "--group-size", "32"]);
    assert_eq!(out.status.code(), Some(1), "group must divide latent width");
}

#[test]
fn compare_methods_reports_identical_scores_for_equivalent_methods() {
    let dir = scratch("compare_collapse");
    let body = format!(
        "{}\n{}",
        tiny_config(),
        r#"
[compare]
balance_params = false

[[compare.methods]]
label = "mla"
attn = { variant = "mla", n_layers = 2, d_model = 16, n_heads = 2, head_dim = 8, latent_dim = 8, rope_dim = 4 }

[[compare.methods]]
label = "clla_f1"
attn = { variant = "clla_share_latent", n_layers = 2, d_model = 16, n_heads = 2, head_dim = 8, latent_dim = 8, rope_dim = 4, sharing_factor = 1 }
"#
    );
    let path = write_config(&dir, &body);
    let out = kvlab(&[
        "compare-methods",
        "--config",
        path.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let tsv = fs::read_to_string(dir.join("compare.tsv")).unwrap();
    let mut lines = tsv.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2, "{tsv}");
    // A sharing factor of one is plain latent attention: training curves
    // and held-out scores must agree to the digit.
    for col in ["loss_first", "loss_final", "val_ppl", "params"] {
        let idx = header.iter().position(|h| *h == col).unwrap();
        assert_eq!(rows[0][idx], rows[1][idx], "{col} differs:\n{tsv}");
    }
    assert!(dir.join("memory_convention.tsv").exists());
    assert!(dir.join("memory_principled.tsv").exists());
    assert!(dir.join("train_log_mla.tsv").exists());
}

#[test]
fn compare_without_a_methods_section_is_a_usage_error() {
    let dir = scratch("compare_missing");
    let path = write_config(&dir, &tiny_config());
    let out = kvlab(&["compare-methods", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("[compare]"), "{}", stderr_of(&out));
}

#[test]
fn failing_gradient_check_exits_with_the_internal_code() {
    // A non-positive tolerance is rejected up front as a usage error.
    let out = kvlab(&["grad-check", "--tolerance", "0.0"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));

    // A tolerance below finite-difference noise cannot be met; the command
    // must report the failures through the internal-error exit code.
    let out = kvlab(&["grad-check", "--tolerance", "1e-13"]);
    assert_eq!(out.status.code(), Some(2), "{}", stdout_of(&out));
    assert!(stdout_of(&out).contains("FAIL"), "{}", stdout_of(&out));
}
