//! Differentiable ops over [`Tensor`].
//!
//! Every op validates operand shapes up front, computes in `f64`, rejects
//! non-finite outputs, and attaches an exact backward rule when any input
//! requires gradients. Backward rules return one gradient per input, in
//! input order, skipping (`None`) inputs that are not tracked.

use super::Tensor;
use crate::error::{Error, Result};

/// Additive mask value treated as negative infinity by softmax without
/// producing actual infinities (which ops reject).
pub const MASK_NEG: f64 = -1e30;

/// `C = op(A) . op(B)` where `op` optionally transposes; `C` is `m x n`
/// with inner dimension `k`. `A` is stored `m x k` (`k x m` when `ta`),
/// `B` is stored `k x n` (`n x k` when `tb`).
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *o = acc;
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let arow = &a[kk * m..(kk + 1) * m];
                let brow = &b[kk * n..(kk + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => unreachable!("no backward rule needs a double transpose"),
    }
    out
}

fn maybe(t: &Tensor, f: impl FnOnce() -> Vec<f64>) -> Option<Vec<f64>> {
    t.requires_grad().then(f)
}

/// `A[m x k] . B[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} . {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let data = mm(a.data(), b.data(), m, k, n, false, false);
    let (ca, cb) = (a.clone(), b.clone());
    Tensor::from_op(
        "matmul",
        &[a, b],
        m,
        n,
        data,
        Box::new(move |g| {
            vec![
                maybe(&ca, || mm(g, cb.data(), m, n, k, false, true)),
                maybe(&cb, || mm(ca.data(), g, k, m, n, true, false)),
            ]
        }),
    )
}

/// `A[m x k] . B[n x k]^T` — matmul against the transpose without
/// materializing it (cache reads are stored row-major per token).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "matmul_nt",
            format!("{}x{} . ({}x{})^T", a.rows(), a.cols(), b.rows(), b.cols()),
        ));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let data = mm(a.data(), b.data(), m, k, n, false, true);
    let (ca, cb) = (a.clone(), b.clone());
    Tensor::from_op(
        "matmul_nt",
        &[a, b],
        m,
        n,
        data,
        Box::new(move |g| {
            vec![
                maybe(&ca, || mm(g, cb.data(), m, n, k, false, false)),
                maybe(&cb, || mm(g, ca.data(), n, m, k, true, false)),
            ]
        }),
    )
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    let (ca, cb) = (a.clone(), b.clone());
    Tensor::from_op(
        "add",
        &[a, b],
        a.rows(),
        a.cols(),
        data,
        Box::new(move |g| vec![maybe(&ca, || g.to_vec()), maybe(&cb, || g.to_vec())]),
    )
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ca, cb) = (a.clone(), b.clone());
    Tensor::from_op(
        "mul",
        &[a, b],
        a.rows(),
        a.cols(),
        data,
        Box::new(move |g| {
            vec![
                maybe(&ca, || g.iter().zip(cb.data()).map(|(gv, y)| gv * y).collect()),
                maybe(&cb, || g.iter().zip(ca.data()).map(|(gv, x)| gv * x).collect()),
            ]
        }),
    )
}

/// Multiply by a constant scalar.
pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    if !s.is_finite() {
        return Err(Error::non_finite("scale", format!("factor is {s}")));
    }
    let data = a.data().iter().map(|x| x * s).collect();
    let ca = a.clone();
    Tensor::from_op(
        "scale",
        &[a],
        a.rows(),
        a.cols(),
        data,
        Box::new(move |g| vec![maybe(&ca, || g.iter().map(|gv| gv * s).collect())]),
    )
}

/// Sum of all elements, as 1x1.
pub fn sum(a: &Tensor) -> Result<Tensor> {
    let total: f64 = a.data().iter().sum();
    let n = a.numel();
    let ca = a.clone();
    Tensor::from_op(
        "sum",
        &[a],
        1,
        1,
        vec![total],
        Box::new(move |g| vec![maybe(&ca, || vec![g[0]; n])]),
    )
}

/// Mean of all elements, as 1x1.
pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.numel() == 0 {
        return Err(Error::shape("mean", "empty tensor".to_string()));
    }
    let n = a.numel();
    let total: f64 = a.data().iter().sum();
    let ca = a.clone();
    Tensor::from_op(
        "mean",
        &[a],
        1,
        1,
        vec![total / n as f64],
        Box::new(move |g| vec![maybe(&ca, || vec![g[0] / n as f64; n])]),
    )
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.cols() == 0 {
        return Err(Error::shape("softmax_rows", "zero columns".to_string()));
    }
    let (r, c) = x.shape();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[i * c..(i + 1) * c];
        let mut denom = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            denom += *o;
        }
        for o in out.iter_mut() {
            *o /= denom;
        }
    }
    let probs = data.clone();
    let cx = x.clone();
    Tensor::from_op(
        "softmax_rows",
        &[x],
        r,
        c,
        data,
        Box::new(move |g| {
            vec![maybe(&cx, || {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let p = &probs[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                    for ((d, &pv), &gv) in
                        dx[i * c..(i + 1) * c].iter_mut().zip(p).zip(gr)
                    {
                        *d = pv * (gv - dot);
                    }
                }
                dx
            })]
        }),
    )
}

/// Row-wise RMS normalization with a learned per-column gain:
/// `y_ij = gain_j * x_ij / sqrt(mean_j(x_ij^2) + eps)`.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.shape();
    if gain.shape() != (1, c) {
        return Err(Error::shape(
            "rmsnorm",
            format!("gain must be 1x{c}, got {}x{}", gain.rows(), gain.cols()),
        ));
    }
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(Error::non_finite("rmsnorm", format!("eps is {eps}")));
    }
    let mut data = vec![0.0; r * c];
    let mut rms = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let rv = (ms + eps).sqrt();
        rms[i] = rv;
        for ((o, &v), &gn) in data[i * c..(i + 1) * c].iter_mut().zip(row).zip(gain.data())
        {
            *o = gn * v / rv;
        }
    }
    let (cx, cg) = (x.clone(), gain.clone());
    Tensor::from_op(
        "rmsnorm",
        &[x, gain],
        r,
        c,
        data,
        Box::new(move |g| {
            let xd = cx.data();
            let gd = cg.data();
            let dx = maybe(&cx, || {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let rv = rms[i];
                    let xr = &xd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = (0..c).map(|j| gr[j] * gd[j] * xr[j]).sum();
                    let coeff = s / (c as f64 * rv * rv * rv);
                    for (j, d) in dx[i * c..(i + 1) * c].iter_mut().enumerate() {
                        *d = gr[j] * gd[j] / rv - xr[j] * coeff;
                    }
                }
                dx
            });
            let dg = maybe(&cg, || {
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    let rv = rms[i];
                    let xr = &xd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    for j in 0..c {
                        dg[j] += gr[j] * xr[j] / rv;
                    }
                }
                dg
            });
            vec![dx, dg]
        }),
    )
}

/// Rotary position embedding over the full width: adjacent element pairs
/// `(2i, 2i+1)` rotate by `pos * base^(-2i/d)`.
pub fn rope_apply(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    rope_apply_blocks(x, positions, base, x.cols())
}

/// Rotary embedding applied independently to each `block`-wide column
/// group (one group per head when heads are packed side by side). Pair
/// angles use the index within the block, so every head sees the same
/// frequency schedule.
// Index loops mirror the flat-buffer addressing; iterators obscure it.
#[allow(clippy::needless_range_loop)]
pub fn rope_apply_blocks(
    x: &Tensor,
    positions: &[usize],
    base: f64,
    block: usize,
) -> Result<Tensor> {
    let (r, c) = x.shape();
    if block == 0 || !block.is_multiple_of(2) || c % block != 0 {
        return Err(Error::shape(
            "rope_apply",
            format!("block {block} must be even and divide width {c}"),
        ));
    }
    if positions.len() != r {
        return Err(Error::shape(
            "rope_apply",
            format!("{} positions for {} rows", positions.len(), r),
        ));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::non_finite("rope_apply", format!("base is {base}")));
    }
    let half = block / 2;
    let inv_freq: Vec<f64> =
        (0..half).map(|i| base.powf(-((2 * i) as f64) / block as f64)).collect();
    let rotate = |src: &[f64], invert: bool| -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let pos = positions[i] as f64;
            for b in (0..c).step_by(block) {
                for p in 0..half {
                    let theta = pos * inv_freq[p];
                    let (s, co) = theta.sin_cos();
                    let s = if invert { -s } else { s };
                    let i0 = i * c + b + 2 * p;
                    let (x0, x1) = (src[i0], src[i0 + 1]);
                    out[i0] = x0 * co - x1 * s;
                    out[i0 + 1] = x0 * s + x1 * co;
                }
            }
        }
        out
    };
    let data = rotate(x.data(), false);
    let cx = x.clone();
    let positions = positions.to_vec();
    let inv = inv_freq.clone();
    Tensor::from_op(
        "rope_apply",
        &[x],
        r,
        c,
        data,
        Box::new(move |g| {
            vec![maybe(&cx, || {
                // The rotation is orthogonal; its transpose is the
                // opposite rotation.
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let pos = positions[i] as f64;
                    for b in (0..c).step_by(block) {
                        for p in 0..half {
                            let theta = pos * inv[p];
                            let (s, co) = theta.sin_cos();
                            let i0 = i * c + b + 2 * p;
                            let (g0, g1) = (g[i0], g[i0 + 1]);
                            out[i0] = g0 * co + g1 * s;
                            out[i0 + 1] = -g0 * s + g1 * co;
                        }
                    }
                }
                out
            })]
        }),
    )
}

/// Stack tensors vertically (all must share a column count).
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_rows", "no parts".to_string()));
    }
    let c = parts[0].cols();
    let mut rows = 0;
    for p in parts {
        if p.cols() != c {
            return Err(Error::shape(
                "concat_rows",
                format!("column mismatch: {} vs {}", p.cols(), c),
            ));
        }
        rows += p.rows();
    }
    let mut data = Vec::with_capacity(rows * c);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Tensor::from_op(
        "concat_rows",
        parts,
        rows,
        c,
        data,
        Box::new(move |g| {
            let mut offset = 0;
            handles
                .iter()
                .zip(&sizes)
                .map(|(h, &sz)| {
                    let piece = maybe(h, || g[offset..offset + sz].to_vec());
                    offset += sz;
                    piece
                })
                .collect()
        }),
    )
}

/// Stack tensors side by side (all must share a row count).
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no parts".to_string()));
    }
    let r = parts[0].rows();
    let mut cols = 0;
    for p in parts {
        if p.rows() != r {
            return Err(Error::shape(
                "concat_cols",
                format!("row mismatch: {} vs {}", p.rows(), r),
            ));
        }
        cols += p.cols();
    }
    let mut data = vec![0.0; r * cols];
    let mut start = 0;
    for p in parts {
        let pc = p.cols();
        for i in 0..r {
            data[i * cols + start..i * cols + start + pc].copy_from_slice(p.row(i));
        }
        start += pc;
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    Tensor::from_op(
        "concat_cols",
        parts,
        r,
        cols,
        data,
        Box::new(move |g| {
            let mut start = 0;
            handles
                .iter()
                .zip(&widths)
                .map(|(h, &w)| {
                    let piece = maybe(h, || {
                        let mut out = vec![0.0; r * w];
                        for i in 0..r {
                            out[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * cols + start..i * cols + start + w]);
                        }
                        out
                    });
                    start += w;
                    piece
                })
                .collect()
        }),
    )
}

/// Contiguous column window `[start, start+len)`.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = x.shape();
    if len == 0 || start + len > c {
        return Err(Error::shape(
            "slice_cols",
            format!("window [{start}, {}) of width {c}", start + len),
        ));
    }
    let mut data = Vec::with_capacity(r * len);
    for i in 0..r {
        data.extend_from_slice(&x.row(i)[start..start + len]);
    }
    let cx = x.clone();
    Tensor::from_op(
        "slice_cols",
        &[x],
        r,
        len,
        data,
        Box::new(move |g| {
            vec![maybe(&cx, || {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                out
            })]
        }),
    )
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| v / (1.0 + (-v).exp())).collect();
    let cx = x.clone();
    Tensor::from_op(
        "silu",
        &[x],
        x.rows(),
        x.cols(),
        data,
        Box::new(move |g| {
            vec![maybe(&cx, || {
                cx.data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gv)| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect()
            })]
        }),
    )
}

/// Mean cross-entropy of row-wise logits against integer targets,
/// computed via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (r, c) = logits.shape();
    if targets.len() != r {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} targets for {} rows", targets.len(), r),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::shape(
            "cross_entropy",
            format!("target {bad} out of range for {c} classes"),
        ));
    }
    let mut probs = vec![0.0; r * c];
    let mut total = 0.0;
    for i in 0..r {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p = &mut probs[i * c..(i + 1) * c];
        let mut denom = 0.0;
        for (o, &v) in p.iter_mut().zip(row) {
            *o = (v - m).exp();
            denom += *o;
        }
        for o in p.iter_mut() {
            *o /= denom;
        }
        let lse = m + denom.ln();
        total += lse - row[targets[i]];
    }
    let cx = logits.clone();
    let targets = targets.to_vec();
    Tensor::from_op(
        "cross_entropy",
        &[logits],
        1,
        1,
        vec![total / r as f64],
        Box::new(move |g| {
            vec![maybe(&cx, || {
                let w = g[0] / r as f64;
                let mut dz = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dz[i * c + t] -= 1.0;
                }
                for d in dz.iter_mut() {
                    *d *= w;
                }
                dz
            })]
        }),
    )
}

/// Gather rows of `table` by id; backward scatter-adds into the table.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = table.shape();
    if let Some(&bad) = ids.iter().find(|&&t| t >= v) {
        return Err(Error::shape(
            "embedding",
            format!("id {bad} out of range for table with {v} rows"),
        ));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        data.extend_from_slice(table.row(id));
    }
    let ct = table.clone();
    let ids_cap = ids.to_vec();
    let s = ids.len();
    Tensor::from_op(
        "embedding",
        &[table],
        s,
        d,
        data,
        Box::new(move |g| {
            vec![maybe(&ct, || {
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids_cap.iter().enumerate() {
                    for (acc, gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d])
                    {
                        *acc += gv;
                    }
                }
                dt
            })]
        }),
    )
}

/// Additive causal mask for a block of `new_rows` queries appended to a
/// context of `total` keys: row `i` may attend to positions
/// `0..=total-new_rows+i`. Constant (never differentiated).
pub fn causal_mask(new_rows: usize, total: usize) -> Result<Tensor> {
    if new_rows == 0 || new_rows > total {
        return Err(Error::shape(
            "causal_mask",
            format!("{new_rows} new rows against {total} total"),
        ));
    }
    let past = total - new_rows;
    let mut data = vec![0.0; new_rows * total];
    for i in 0..new_rows {
        for j in (past + i + 1)..total {
            data[i * total + j] = MASK_NEG;
        }
    }
    Tensor::from_vec(new_rows, total, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::GradTape;

    fn grad_for(y: &Tensor, x: &Tensor) -> Vec<f64> {
        let mut tape = GradTape::record(y);
        tape.backward().unwrap();
        tape.grad_of(x).unwrap().to_vec()
    }

    #[test]
    fn matmul_hand_value() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.value().unwrap(), 11.0);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, 0.0, 1.0], vec![-1.0, 1.0, 0.5]]).unwrap();
        let c = matmul_nt(&a, &b).unwrap();
        // Row i of c = a_i . b_j.
        assert_eq!(c.at(0, 0), 1.0 * 2.0 + 2.0 * 0.0 + 3.0 * 1.0);
        assert_eq!(c.at(0, 1), -1.0 + 2.0 + 1.5);
        assert_eq!(c.at(1, 0), 1.0 + 0.0 + 2.0);
    }

    #[test]
    fn softmax_hand_value() {
        let x = Tensor::from_rows(&[vec![1.0f64.ln(), 3.0f64.ln()]]).unwrap();
        let p = softmax_rows(&x).unwrap();
        assert!((p.at(0, 0) - 0.25).abs() < 1e-12);
        assert!((p.at(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_mask() {
        let x = Tensor::from_rows(&[vec![5.0, MASK_NEG, 2.0]]).unwrap();
        let p = softmax_rows(&x).unwrap();
        let s: f64 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(p.at(0, 1), 0.0);
    }

    #[test]
    fn rmsnorm_hand_value() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = rmsnorm(&x, &g, 0.0).unwrap();
        // rms = sqrt((9+16)/2) = sqrt(12.5)
        assert!((y.at(0, 0) - 0.848528137).abs() < 1e-8);
        assert!((y.at(0, 1) - 1.131370850).abs() < 1e-8);
    }

    #[test]
    fn rope_position_zero_is_identity_and_pair_rotates() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let y = rope_apply(&x, &[0, 3], 10000.0).unwrap();
        assert_eq!(y.row(0), &[1.0, 0.0]);
        assert!((y.at(1, 0) - 3.0f64.cos()).abs() < 1e-12);
        assert!((y.at(1, 1) - 3.0f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn rope_blocks_rotate_each_head_independently() {
        // Two heads of width 2; both should see the same frequency.
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 1.0]]).unwrap();
        let y = rope_apply_blocks(&x, &[2], 10000.0, 2).unwrap();
        let (s, c) = (2.0f64).sin_cos();
        assert!((y.at(0, 0) - c).abs() < 1e-12);
        assert!((y.at(0, 1) - s).abs() < 1e-12);
        assert!((y.at(0, 2) + s).abs() < 1e-12);
        assert!((y.at(0, 3) - c).abs() < 1e-12);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.7]]).unwrap();
        let y = rope_apply(&x, &[17], 10000.0).unwrap();
        for p in 0..2 {
            let n0 = x.at(0, 2 * p).hypot(x.at(0, 2 * p + 1));
            let n1 = y.at(0, 2 * p).hypot(y.at(0, 2 * p + 1));
            assert!((n0 - n1).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), (2, 3));
        assert_eq!(c.row(1), &[3.0, 4.0, 6.0]);
        let back = slice_cols(&c, 0, 2).unwrap();
        assert!(back.bit_eq(&a));

        let d = concat_rows(&[&a, &a]).unwrap();
        assert_eq!(d.shape(), (4, 2));
        assert_eq!(d.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Tensor::zeros(2, 4);
        let loss = cross_entropy(&z, &[1, 3]).unwrap().value().unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let z = Tensor::zeros(1, 4);
        assert!(cross_entropy(&z, &[4]).is_err());
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let table = Tensor::param_from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let e = embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(e.row(0), &[5.0, 6.0]);
        let y = sum(&e).unwrap();
        let g = grad_for(&y, &table);
        // Row 2 gathered twice, row 0 once, row 1 never.
        assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn causal_mask_shape_and_pattern() {
        let m = causal_mask(2, 5).unwrap();
        assert_eq!(m.shape(), (2, 5));
        // First new row attends to positions 0..=3.
        assert_eq!(m.row(0), &[0.0, 0.0, 0.0, 0.0, MASK_NEG]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn scale_by_zero_gives_zero_grads() {
        let x = Tensor::param_from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = sum(&scale(&x, 0.0).unwrap()).unwrap();
        assert_eq!(grad_for(&y, &x), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_grads_hand_checked() {
        // y = sum(A . B), dA = ones . B^T, dB = A^T . ones.
        let a = Tensor::param_from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::param_from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        let y = sum(&matmul(&a, &b).unwrap()).unwrap();
        let mut tape = GradTape::record(&y);
        tape.backward().unwrap();
        assert_eq!(tape.grad_of(&a).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad_of(&b).unwrap(), &[1.0, 2.0]);
    }
}
