//! Forward kernels and the adjoints the tape uses to differentiate them.

use super::{gemm, Layout, Scalar, Tensor};
use crate::error::{Error, Result};

/// Default LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Added inside `log` by the cross-entropy kernel.
pub const LOG_EPS: f64 = 1e-12;

/// Row-sum tolerance for inputs of [`cross_entropy_rows`].
pub const DISTRIBUTION_TOL: f64 = 1e-4;

/// `a·b` for `m×k` by `k×n`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(
        a.data(),
        Layout::Normal { rows: m, cols: k },
        b.data(),
        Layout::Normal { rows: k, cols: n },
        &mut out,
        false,
    );
    Tensor::new(&[m, n], out)
}

/// `a·bᵀ` for `m×k` by `n×k`.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.matrix_dims("matmul_nt")?;
    let (n, k2) = b.matrix_dims("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![F::zero(); m * n];
    gemm(
        a.data(),
        Layout::Normal { rows: m, cols: k },
        b.data(),
        Layout::Transposed { rows: n, cols: k },
        &mut out,
        false,
    );
    Tensor::new(&[m, n], out)
}

const LANES: usize = 8;

/// Sum with eight independent accumulators. Plain iterator sums form one
/// serial dependency chain, which made row reductions latency bound.
pub(crate) fn lane_sum<F: Scalar>(xs: &[F]) -> F {
    lane_fold(xs, F::zero(), |a, x| a + x, |a, b| a + b)
}

pub(crate) fn lane_dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = combine(acc, |p, q| p + q);
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    total
}

fn lane_max<F: Scalar>(xs: &[F]) -> F {
    lane_fold(xs, xs[0], |a, x| if x > a { x } else { a }, |a, b| if b > a { b } else { a })
}

fn lane_fold<F: Scalar>(xs: &[F], init: F, step: impl Fn(F, F) -> F, merge: impl Fn(F, F) -> F) -> F {
    let mut acc = [init; LANES];
    let chunks = xs.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..LANES {
            acc[i] = step(acc[i], c[i]);
        }
    }
    let mut total = combine(acc, &merge);
    for &x in rest {
        total = step(total, x);
    }
    total
}

fn combine<F: Scalar>(acc: [F; LANES], merge: impl Fn(F, F) -> F) -> F {
    merge(
        merge(merge(acc[0], acc[4]), merge(acc[1], acc[5])),
        merge(merge(acc[2], acc[6]), merge(acc[3], acc[7])),
    )
}


/// Softmax over the last axis, stabilized by subtracting each row's max.
pub fn softmax_rows<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    x.check_finite("softmax_rows")?;
    let n = *x.shape().last().ok_or_else(|| Error::shape("softmax_rows", x.shape(), &[1]))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = lane_max(row);
        for v in row.iter_mut() {
            *v -= max;
        }
        F::exp_in_place(row);
        let total = lane_sum(row);
        let inv = total.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward<F: Scalar>(y: &Tensor<F>, grad: &Tensor<F>) -> Vec<F> {
    let n = *y.shape().last().expect("softmax output has rank >= 1");
    let mut dx = vec![F::zero(); y.len()];
    for ((yr, gr), dr) in y.data().chunks(n).zip(grad.data().chunks(n)).zip(dx.chunks_mut(n)) {
        let dot = lane_dot(yr, gr);
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// Per-row statistics kept by the tape for the LayerNorm adjoint.
#[derive(Debug, Clone)]
pub(crate) struct RowStats<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

/// Normalizes each row of an `N×d` tensor, then applies `gain` and `bias`.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, gain: &Tensor<F>, bias: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    layer_norm_with_stats(x, gain, bias, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_stats<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, RowStats<F>)> {
    let (_, d) = x.matrix_dims("layer_norm")?;
    if gain.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    if bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), bias.shape()));
    }
    if eps <= F::zero() {
        return Err(Error::config("layer_norm eps must be positive"));
    }
    let inv_d = F::from_usize(d).expect("width").recip();
    let mut out = x.data().to_vec();
    let mut stats = RowStats {
        mean: Vec::new(),
        rstd: Vec::new(),
    };
    for row in out.chunks_mut(d) {
        let mean = lane_sum(row) * inv_d;
        for v in row.iter_mut() {
            *v -= mean;
        }
        let var = lane_dot(row, row) * inv_d;
        let rstd = (var + eps).sqrt().recip();
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * rstd * g + b;
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    stats: &RowStats<F>,
    grad: &Tensor<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = gain.len();
    let inv_d = F::from_usize(d).expect("width").recip();
    let mut dx = vec![F::zero(); x.len()];
    let mut dgain = vec![F::zero(); d];
    let mut dbias = vec![F::zero(); d];
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for (r, ((xr, gr), dxr)) in x
        .data()
        .chunks(d)
        .zip(grad.data().chunks(d))
        .zip(dx.chunks_mut(d))
        .enumerate()
    {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        for j in 0..d {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = gr[j] * gain.data()[j];
            dgain[j] += gr[j] * xhat[j];
            dbias[j] += gr[j];
        }
        let sum_dxhat = lane_sum(&dxhat);
        let sum_dxhat_xhat = lane_dot(&dxhat, &xhat);
        for j in 0..d {
            dxr[j] = rstd * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

fn std_normal_cdf<F: Scalar>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    half * (F::one() + (x * F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Exact GELU, `x·Φ(x)` with the erf-based normal CDF.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * std_normal_cdf(v))
}

/// GELU output together with `Φ(x)`, which the adjoint reuses.
pub(crate) fn gelu_with_cdf<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<F>)> {
    let cdf: Vec<F> = x.data().iter().map(|&v| std_normal_cdf(v)).collect();
    let out = x.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
    Ok((Tensor::new(x.shape(), out)?, cdf))
}

pub(crate) fn gelu_backward<F: Scalar>(x: &Tensor<F>, cdf: &[F], grad: &Tensor<F>) -> Vec<F> {
    let inv_sqrt_2pi = F::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let half = F::from_f64_lossy(0.5);
    let mut pdf: Vec<F> = x.data().iter().map(|&v| -half * v * v).collect();
    F::exp_in_place(&mut pdf);
    x.data()
        .iter()
        .zip(cdf)
        .zip(grad.data())
        .zip(&pdf)
        .map(|(((&v, &c), &g), &p)| g * (c + v * p * inv_sqrt_2pi))
        .collect()
}

fn conv_dims<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
    let (h, w, d) = match x.shape()[..] {
        [h, w, d] => (h, w, d),
        _ => return Err(Error::shape("depthwise_conv2d", x.shape(), kernels.shape())),
    };
    let k = match kernels.shape()[..] {
        [k, k2, d2] if k == k2 && d2 == d => k,
        _ => return Err(Error::shape("depthwise_conv2d", x.shape(), kernels.shape())),
    };
    if k % 2 == 0 {
        return Err(Error::config(format!("depthwise kernel size must be odd, got {k}")));
    }
    Ok((h, w, d, k))
}

/// Per-channel 2-D cross-correlation of an `h×w×d` grid with `K×K×d`
/// kernels; stride 1, zero "same" padding.
pub fn depthwise_conv2d<F: Scalar>(x: &Tensor<F>, kernels: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w, d, k) = conv_dims(x, kernels)?;
    let pad = (k / 2) as isize;
    let xs = x.data();
    let ks = kernels.data();
    let mut out = vec![F::zero(); h * w * d];
    for i in 0..h {
        for j in 0..w {
            let o = &mut out[(i * w + j) * d..(i * w + j + 1) * d];
            for a in 0..k {
                let si = i as isize + a as isize - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let sj = j as isize + b as isize - pad;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = &xs[(si as usize * w + sj as usize) * d..][..d];
                    let ker = &ks[(a * k + b) * d..][..d];
                    for c in 0..d {
                        o[c] += src[c] * ker[c];
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(dx, dkernels)`.
pub(crate) fn depthwise_conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    kernels: &Tensor<F>,
    grad: &Tensor<F>,
) -> (Vec<F>, Vec<F>) {
    let (h, w, d, k) = conv_dims(x, kernels).expect("validated in forward");
    let pad = (k / 2) as isize;
    let (xs, ks, gs) = (x.data(), kernels.data(), grad.data());
    let mut dx = vec![F::zero(); xs.len()];
    let mut dk = vec![F::zero(); ks.len()];
    for i in 0..h {
        for j in 0..w {
            let g = &gs[(i * w + j) * d..][..d];
            for a in 0..k {
                let si = i as isize + a as isize - pad;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for b in 0..k {
                    let sj = j as isize + b as isize - pad;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let base = (si as usize * w + sj as usize) * d;
                    let kb = (a * k + b) * d;
                    for c in 0..d {
                        dx[base + c] += g[c] * ks[kb + c];
                        dk[kb + c] += g[c] * xs[base + c];
                    }
                }
            }
        }
    }
    (dx, dk)
}

fn check_distribution<F: Scalar>(t: &Tensor<F>, what: &str) -> Result<()> {
    let n = *t.shape().last().unwrap_or(&1);
    for (r, row) in t.data().chunks(n).enumerate() {
        let s = row.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        if (s - 1.0).abs() > DISTRIBUTION_TOL || row.iter().any(|&v| v < F::zero()) {
            return Err(Error::Distribution(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// `−(1/m) Σ_rows Σ_j teacher_j · log(student_j + LOG_EPS)`.
///
/// Rows run along the last axis; every leading axis counts towards `m`.
pub fn cross_entropy_rows<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>) -> Result<F> {
    if student.shape() != teacher.shape() || student.rank() == 0 {
        return Err(Error::shape("cross_entropy_rows", student.shape(), teacher.shape()));
    }
    check_distribution(student, "student")?;
    check_distribution(teacher, "teacher")?;
    let n = *student.shape().last().expect("rank >= 1");
    let rows = F::from_usize(student.len() / n).expect("row count");
    let eps = F::from_f64_lossy(LOG_EPS);
    let total: F = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&p, &q)| q * (p + eps).ln())
        .sum();
    Ok(-total / rows)
}

pub(crate) fn cross_entropy_backward<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>, grad: F) -> Vec<F> {
    let n = *student.shape().last().expect("rank >= 1");
    let scale = -grad / F::from_usize(student.len() / n).expect("row count");
    let eps = F::from_f64_lossy(LOG_EPS);
    student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(&p, &q)| scale * q / (p + eps))
        .collect()
}
