//! `kvlab grad-check`: finite-difference validation of every
//! differentiable op and every attention variant, plus a harness
//! self-test against a deliberately broken backward rule.
//!
//! The quantized latent path is excluded by design: its backward rule is
//! a straight-through estimator, which is not the derivative of the
//! rounding forward and therefore cannot pass a finite-difference check.
//! That rule is validated by explicit contract tests instead.

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kvlab_core::attention::{AttnConfig, Variant};
use kvlab_core::cache::KVCache;
use kvlab_core::model::{Model, ModelConfig};
use kvlab_core::tensor::gradcheck::{grad_check, square_broken_backward, GradCheckReport};
use kvlab_core::tensor::{ops, Tensor};

use crate::Failure;

#[derive(Args)]
pub struct GradCheckArgs {
    /// Maximum allowed relative error between analytic and numeric
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Seed for the random probe points
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("finite random data")
}

struct Check {
    name: String,
    report: GradCheckReport,
}

type OpCase = (&'static str, Box<dyn Fn(&mut ChaCha8Rng, f64) -> Result<GradCheckReport, Failure>>);

/// Reduce a matrix output to a scalar through a fixed random weighting, so
/// every output element influences the checked scalar differently.
fn weighted_mean(x: &Tensor, w: &Tensor) -> kvlab_core::Result<Tensor> {
    ops::mean(&ops::mul(x, w)?)
}

fn op_cases() -> Vec<OpCase> {
    fn case<F>(
        name: &'static str,
        f: F,
    ) -> OpCase
    where
        F: Fn(&mut ChaCha8Rng, f64) -> Result<GradCheckReport, Failure> + 'static,
    {
        (name, Box::new(f))
    }

    vec![
        case("matmul", |rng, eps| {
            let inputs = [rand_tensor(rng, 3, 4), rand_tensor(rng, 4, 2)];
            Ok(grad_check(|p| ops::mean(&ops::matmul(&p[0], &p[1])?), &inputs, eps)?)
        }),
        case("matmul_nt", |rng, eps| {
            let inputs = [rand_tensor(rng, 3, 4), rand_tensor(rng, 2, 4)];
            Ok(grad_check(|p| ops::mean(&ops::matmul_nt(&p[0], &p[1])?), &inputs, eps)?)
        }),
        case("add", |rng, eps| {
            let w = rand_tensor(rng, 3, 4);
            let inputs = [rand_tensor(rng, 3, 4), rand_tensor(rng, 3, 4)];
            Ok(grad_check(move |p| weighted_mean(&ops::add(&p[0], &p[1])?, &w), &inputs, eps)?)
        }),
        case("mul", |rng, eps| {
            let w = rand_tensor(rng, 3, 4);
            let inputs = [rand_tensor(rng, 3, 4), rand_tensor(rng, 3, 4)];
            Ok(grad_check(move |p| weighted_mean(&ops::mul(&p[0], &p[1])?, &w), &inputs, eps)?)
        }),
        case("scale", |rng, eps| {
            let inputs = [rand_tensor(rng, 2, 5)];
            Ok(grad_check(|p| ops::sum(&ops::scale(&p[0], -1.7)?), &inputs, eps)?)
        }),
        case("sum", |rng, eps| {
            let inputs = [rand_tensor(rng, 2, 3)];
            Ok(grad_check(|p| ops::sum(&p[0]), &inputs, eps)?)
        }),
        case("mean", |rng, eps| {
            let inputs = [rand_tensor(rng, 2, 3)];
            Ok(grad_check(|p| ops::mean(&p[0]), &inputs, eps)?)
        }),
        case("softmax_rows", |rng, eps| {
            let w = rand_tensor(rng, 3, 5);
            let inputs = [rand_tensor(rng, 3, 5)];
            Ok(grad_check(move |p| weighted_mean(&ops::softmax_rows(&p[0])?, &w), &inputs, eps)?)
        }),
        case("rmsnorm", |rng, eps| {
            let w = rand_tensor(rng, 3, 6);
            let inputs = [rand_tensor(rng, 3, 6), rand_tensor(rng, 1, 6)];
            Ok(grad_check(
                move |p| weighted_mean(&ops::rmsnorm(&p[0], &p[1], 1e-6)?, &w),
                &inputs,
                eps,
            )?)
        }),
        case("rope_apply", |rng, eps| {
            let w = rand_tensor(rng, 3, 4);
            let inputs = [rand_tensor(rng, 3, 4)];
            Ok(grad_check(
                move |p| weighted_mean(&ops::rope_apply(&p[0], &[0, 3, 7], 10000.0)?, &w),
                &inputs,
                eps,
            )?)
        }),
        case("rope_apply_blocks", |rng, eps| {
            let w = rand_tensor(rng, 2, 8);
            let inputs = [rand_tensor(rng, 2, 8)];
            Ok(grad_check(
                move |p| weighted_mean(&ops::rope_apply_blocks(&p[0], &[1, 4], 10000.0, 4)?, &w),
                &inputs,
                eps,
            )?)
        }),
        case("concat_rows", |rng, eps| {
            let w = rand_tensor(rng, 3, 3);
            let inputs = [rand_tensor(rng, 2, 3), rand_tensor(rng, 1, 3)];
            Ok(grad_check(
                move |p| weighted_mean(&ops::concat_rows(&[&p[0], &p[1]])?, &w),
                &inputs,
                eps,
            )?)
        }),
        case("concat_cols", |rng, eps| {
            let w = rand_tensor(rng, 2, 5);
            let inputs = [rand_tensor(rng, 2, 2), rand_tensor(rng, 2, 3)];
            Ok(grad_check(
                move |p| weighted_mean(&ops::concat_cols(&[&p[0], &p[1]])?, &w),
                &inputs,
                eps,
            )?)
        }),
        case("slice_cols", |rng, eps| {
            let w = rand_tensor(rng, 3, 3);
            let inputs = [rand_tensor(rng, 3, 6)];
            Ok(grad_check(
                move |p| weighted_mean(&ops::slice_cols(&p[0], 2, 3)?, &w),
                &inputs,
                eps,
            )?)
        }),
        case("silu", |rng, eps| {
            let w = rand_tensor(rng, 2, 6);
            let inputs = [rand_tensor(rng, 2, 6)];
            Ok(grad_check(move |p| weighted_mean(&ops::silu(&p[0])?, &w), &inputs, eps)?)
        }),
        case("embedding", |rng, eps| {
            let w = rand_tensor(rng, 4, 3);
            let inputs = [rand_tensor(rng, 5, 3)];
            Ok(grad_check(
                move |p| weighted_mean(&ops::embedding(&p[0], &[1, 3, 3, 0])?, &w),
                &inputs,
                eps,
            )?)
        }),
        case("cross_entropy", |rng, eps| {
            let inputs = [rand_tensor(rng, 4, 5)];
            Ok(grad_check(|p| ops::cross_entropy(&p[0], &[1, 0, 4, 2]), &inputs, eps)?)
        }),
    ]
}

/// A tiny but complete model config for one attention variant.
fn variant_model(variant: Variant, q_lora: bool, share_hidden: bool) -> ModelConfig {
    let latent = variant.is_latent();
    ModelConfig {
        attn: AttnConfig {
            variant,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            kv_heads: if variant == Variant::Gqa { Some(1) } else { None },
            latent_dim: if latent { 4 } else { 0 },
            rope_dim: if latent { 2 } else { 0 },
            sharing_factor: if variant.is_cross_layer() { 2 } else { 1 },
            q_lora_rank: if q_lora { Some(6) } else { None },
            share_hidden_states: share_hidden,
            quant: None,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        },
        ffn_hidden: 6,
        vocab_size: 7,
        tie_embeddings: true,
        seed: 0,
    }
}

fn variant_cases() -> Vec<(String, ModelConfig)> {
    let mut cases = vec![
        ("variant mha".to_string(), variant_model(Variant::Mha, false, false)),
        ("variant mqa".to_string(), variant_model(Variant::Mqa, false, false)),
        ("variant gqa".to_string(), variant_model(Variant::Gqa, false, false)),
        ("variant cla".to_string(), variant_model(Variant::Cla, false, false)),
        ("variant cla+hidden".to_string(), variant_model(Variant::Cla, false, true)),
        ("variant mla".to_string(), variant_model(Variant::Mla, false, false)),
        ("variant mla+q_lora".to_string(), variant_model(Variant::Mla, true, false)),
        (
            "variant clla_share_latent".to_string(),
            variant_model(Variant::CllaShareLatent, false, false),
        ),
        (
            "variant clla_share_kvproj".to_string(),
            variant_model(Variant::CllaShareKvproj, false, false),
        ),
        (
            "variant clla_share_krope".to_string(),
            variant_model(Variant::CllaShareKrope, false, false),
        ),
    ];
    // Seed each config differently so probe points differ across cases.
    for (i, (_, cfg)) in cases.iter_mut().enumerate() {
        cfg.seed = 100 + i as u64;
    }
    cases
}

fn check_variant(cfg: &ModelConfig, rng: &mut ChaCha8Rng, eps: f64) -> Result<GradCheckReport, Failure> {
    let proto = Model::init(cfg)?;
    let window: Vec<usize> = (0..6).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let inputs = proto.params();
    let attn = cfg.attn.clone();
    let report = grad_check(
        move |p| {
            let mut m = proto.clone();
            m.replace_params(&mut p.iter().cloned());
            let mut cache = KVCache::new(&attn)?;
            m.loss_on_window(&window, &mut cache)
        },
        &inputs,
        eps,
    )?;
    Ok(report)
}

pub fn run(args: &GradCheckArgs) -> Result<(), Failure> {
    if !args.tolerance.is_finite()
        || args.tolerance <= 0.0
        || !args.eps.is_finite()
        || args.eps <= 0.0
    {
        return Err(Failure::usage("--tolerance and --eps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut results: Vec<Check> = Vec::new();

    for (name, f) in op_cases() {
        let report = f(&mut rng, args.eps)?;
        results.push(Check { name: format!("op {name}"), report });
    }
    for (name, cfg) in variant_cases() {
        let report = check_variant(&cfg, &mut rng, args.eps)?;
        results.push(Check { name, report });
    }

    let mut failed = 0;
    for c in &results {
        let ok = c.report.max_rel_err <= args.tolerance;
        if ok {
            println!("ok   {:<28} max_rel {:.2e}", c.name, c.report.max_rel_err);
        } else {
            failed += 1;
            println!(
                "FAIL {:<28} max_rel {:.2e} (analytic {:.6e} vs numeric {:.6e} at {:?})",
                c.name, c.report.max_rel_err, c.report.analytic, c.report.numeric, c.report.worst
            );
        }
    }
    println!(
        "note quantized latent path: straight-through gradients are contract-tested; \
         finite differences do not apply to rounding"
    );

    // Harness self-test: a deliberately broken rule must be flagged.
    let x = rand_tensor(&mut rng, 2, 3);
    let broken = grad_check(|p| ops::mean(&square_broken_backward(&p[0])?), &[x], args.eps)?;
    if broken.max_rel_err > args.tolerance {
        println!(
            "ok   harness self-test: broken backward 'square_broken_backward' detected \
             (max_rel {:.2e})",
            broken.max_rel_err
        );
    } else {
        return Err(Failure::internal(
            "harness self-test failed: a broken backward rule went undetected".to_string(),
        ));
    }

    if failed > 0 {
        return Err(Failure::internal(format!(
            "{failed} of {} gradient checks exceeded tolerance {:.0e}",
            results.len(),
            args.tolerance
        )));
    }
    println!("all {} checks passed at tolerance {:.0e}", results.len(), args.tolerance);
    Ok(())
}
