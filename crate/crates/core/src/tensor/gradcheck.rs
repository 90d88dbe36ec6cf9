//! Finite-difference gradient checking.
//!
//! [`grad_check`] compares tape gradients of a scalar-valued function
//! against central differences. The function must be smooth at the probe
//! point: anything with rounding inside (the quantized path) is out of
//! scope here and is validated by explicit contract tests instead.

use super::tape::GradTape;
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error across all input elements.
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric derivative at the worst element.
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_err(a: f64, n: f64) -> f64 {
    // Denominator floored at 1 so zero-gradient functions compare
    // absolutely instead of dividing by zero.
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Check `f`'s tape gradients against central differences with step `eps`
/// at the point given by `inputs`. Returns the worst relative error seen.
///
/// `f` is re-evaluated `2 * total_elements` times, so keep probe points
/// small. Inputs are re-wrapped as gradient-tracked leaves; `f` receives
/// them in the order given.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config(format!("grad_check eps must be positive, got {eps}")));
    }
    let params: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::param_from_vec(t.rows(), t.cols(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let y = f(&params)?;
    if y.numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("f must return 1x1, got {}x{}", y.rows(), y.cols()),
        ));
    }
    let mut tape = GradTape::record(&y);
    tape.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| tape.grad_of(p).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report =
        GradCheckReport { max_rel_err: 0.0, worst: None, analytic: 0.0, numeric: 0.0 };
    let eval = |point: &[Tensor]| -> Result<f64> { f(point)?.value() };
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let probe = |delta: f64| -> Result<f64> {
                let mut data = p.data().to_vec();
                data[ei] += delta;
                let mut point: Vec<Tensor> = params.to_vec();
                point[pi] = Tensor::from_vec(p.rows(), p.cols(), data)?;
                eval(&point)
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei];
            let e = rel_err(a, numeric);
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Self-test fixture: squares its input but reports a deliberately wrong
/// backward rule (`3x` instead of `2x`). Exists so the checking harness
/// can prove it catches broken gradients; never use in real models.
#[doc(hidden)]
pub fn square_broken_backward(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v * v).collect();
    let cx = x.clone();
    Tensor::from_op(
        "square_broken_backward",
        &[x],
        x.rows(),
        x.cols(),
        data,
        Box::new(move |g| {
            vec![Some(
                cx.data().iter().zip(g).map(|(&v, gv)| 3.0 * v * gv).collect(),
            )]
        }),
    )
}
