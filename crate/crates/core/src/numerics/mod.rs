//! Dense tensors, forward kernels, a reverse-mode gradient tape and a
//! central-difference gradient checker.
//!
//! Everything in the model is built from the handful of kernels in [`ops`];
//! the [`Tape`] records those same kernels so that a scalar loss can be
//! differentiated with respect to any marked parameter.

mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck, DEFAULT_FD_EPS, DEFAULT_FD_TOL};
pub use ops::{
    cross_entropy_rows, depthwise_conv2d, gelu, layer_norm, matmul, matmul_nt, softmax_rows,
    LN_EPS, LOG_EPS,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    fn erf(self) -> Self;

    /// Elementwise `exp` over a slice.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    /// `c = a·b (+ c)` for an `m×k` by `k×n` product with arbitrary strides.
    ///
    /// # Safety
    /// Strides and extents must address memory inside the three slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    /// Branch-free polynomial exp (within about one ulp of `f32::exp`) that
    /// the compiler can vectorize; the scalar libm call dominated softmax.
    fn exp_in_place(xs: &mut [f32]) {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        // 1.5·2²³: adding it rounds to the nearest integer.
        const ROUND: f32 = 12_582_912.0;
        for x in xs {
            let v = x.clamp(-87.3, 88.7);
            let t = v * LOG2E + ROUND;
            let k = t - ROUND;
            let n = (t.to_bits() as i32).wrapping_sub(ROUND.to_bits() as i32);
            let r = v - k * LN2_HI - k * LN2_LO;
            let mut p = 1.987_569_1e-4f32;
            p = p * r + 1.398_199_9e-3;
            p = p * r + 8.333_452e-3;
            p = p * r + 4.166_579_6e-2;
            p = p * r + 1.666_666_5e-1;
            p = p * r + 5e-1;
            let e = p * r * r + r + 1.0;
            *x = e * f32::from_bits(((n + 127) as u32) << 23);
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Layout of a row-major matrix operand: plain or transposed view.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Layout {
    /// `rows × cols` stored row-major.
    Normal { rows: usize, cols: usize },
    /// The transpose of a row-major `rows × cols` buffer, i.e. a `cols × rows` operand.
    Transposed { rows: usize, cols: usize },
}

impl Layout {
    fn dims(self) -> (usize, usize) {
        match self {
            Layout::Normal { rows, cols } => (rows, cols),
            Layout::Transposed { rows, cols } => (cols, rows),
        }
    }

    fn strides(self) -> (isize, isize) {
        match self {
            Layout::Normal { cols, .. } => (cols as isize, 1),
            Layout::Transposed { cols, .. } => (1, cols as isize),
        }
    }

    fn len(self) -> usize {
        match self {
            Layout::Normal { rows, cols } | Layout::Transposed { rows, cols } => rows * cols,
        }
    }
}

/// Safe wrapper over [`Scalar::gemm_raw`]; `c` is `m×n` row-major.
pub(crate) fn gemm<F: Scalar>(a: &[F], la: Layout, b: &[F], lb: Layout, c: &mut [F], accumulate: bool) {
    let (m, k) = la.dims();
    let (k2, n) = lb.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert!(a.len() >= la.len() && b.len() >= lb.len() && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: extents were checked against the slice lengths above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
