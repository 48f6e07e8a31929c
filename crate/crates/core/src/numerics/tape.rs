use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, RowStats};
use super::{gemm, Layout, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<F> {
    Constant,
    Param(String),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, F),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: RowStats<F>,
    },
    Gelu(usize, Vec<F>),
    DepthwiseConv(usize, usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Stack(Vec<usize>),
    Select { x: usize, index: usize },
    MeanRows(usize),
    Merge2x2 { x: usize, h: usize, w: usize },
    CrossEntropy { student: usize, teacher: usize },
    Sum(usize),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Record of executed operations, replayed backwards by [`Tape::backward`].
///
/// Values enter the tape either as constants or as named parameters. Only
/// nodes that depend on a parameter are differentiated. A tape is owned by
/// one thread while it records.
#[derive(Debug)]
pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Validate every recorded value for NaN/Inf.
    pub fn with_finite_check(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.index(v).expect("variable on this tape")].needs_grad
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!("variable {v:?} is not on tape {}", self.id)));
        }
        Ok(v.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if self.check_finite {
            value.check_finite(op_name)?;
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Marks `value` as a parameter. Marking the same name more than once is
    /// allowed; the gradients of all uses are summed under that name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param(name.into()),
            needs_grad: true,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Same value, cut off from the gradient.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[self.index(v)?].value.clone();
        self.push("detach", value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = ops::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("matmul", out, Op::MatMul(ia, ib), ng)
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = ops::matmul_nt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("matmul_nt", out, Op::MatMulNt(ia, ib), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("add", out, Op::Add(ia, ib), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("mul", out, Op::Mul(ia, ib), ng)
    }

    /// Adds a rank-1 `bias` to every row (last axis) of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(bias)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let width = *av.shape().last().unwrap_or(&0);
        if bv.shape() != [width] {
            return Err(Error::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(width) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(av.shape(), out)?;
        let ng = self.needs(ia) || self.needs(ib);
        self.push("add_bias", out, Op::AddBias(ia, ib), ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.scale(c);
        let ng = self.needs(ia);
        self.push("scale", out, Op::Scale(ia, c), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = ops::softmax_rows(&self.nodes[ia].value)?;
        let ng = self.needs(ia);
        self.push("softmax_rows", out, Op::Softmax(ia), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gain)?, self.index(bias)?);
        let (out, stats) = ops::layer_norm_with_stats(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
            eps,
        )?;
        let ng = self.needs(ix) || self.needs(ig) || self.needs(ib);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                stats,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let (out, cdf) = ops::gelu_with_cdf(&self.nodes[ia].value)?;
        let ng = self.needs(ia);
        self.push("gelu", out, Op::Gelu(ia, cdf), ng)
    }

    /// `x` is an `h×w×d` grid, `kernels` is `K×K×d`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (ix, ik) = (self.index(x)?, self.index(kernels)?);
        let out = ops::depthwise_conv2d(&self.nodes[ix].value, &self.nodes[ik].value)?;
        let ng = self.needs(ix) || self.needs(ik);
        self.push("depthwise_conv2d", out, Op::DepthwiseConv(ix, ik), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.reshape(shape)?;
        let ng = self.needs(ia);
        self.push("reshape", out, Op::Reshape(ia), ng)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let av = &self.nodes[ia].value;
        let (rows, cols) = av.matrix_dims("slice_cols")?;
        if width == 0 || start + width > cols {
            return Err(Error::shape("slice_cols", av.shape(), &[start, width]));
        }
        let mut out = Vec::with_capacity(rows * width);
        for row in av.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let out = Tensor::new(&[rows, width], out)?;
        let ng = self.needs(ia);
        self.push("slice_cols", out, Op::SliceCols { x: ia, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let (rows, _) = self.nodes[*first].value.matrix_dims("concat_cols")?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = self.nodes[i].value.matrix_dims("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.nodes[*first].value.shape(), self.nodes[i].value.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        let ng = idx.iter().any(|&i| self.needs(i));
        self.push("concat_cols", out, Op::ConcatCols(idx), ng)
    }

    /// Stacks equal-shape values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>>>()?;
        let first = *idx.first().ok_or_else(|| Error::Usage("stack of nothing".into()))?;
        let inner = self.nodes[first].value.shape().to_vec();
        let mut out = Vec::with_capacity(inner.iter().product::<usize>() * idx.len());
        for &i in &idx {
            if self.nodes[i].value.shape() != inner.as_slice() {
                return Err(Error::shape("stack", &inner, self.nodes[i].value.shape()));
            }
            out.extend_from_slice(self.nodes[i].value.data());
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&inner);
        let out = Tensor::new(&shape, out)?;
        let ng = idx.iter().any(|&i| self.needs(i));
        self.push("stack", out, Op::Stack(idx), ng)
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let av = &self.nodes[ia].value;
        if av.rank() < 2 || index >= av.shape()[0] {
            return Err(Error::shape("select", av.shape(), &[index]));
        }
        let inner = &av.shape()[1..];
        let n: usize = inner.iter().product();
        let out = Tensor::new(inner, av.data()[index * n..(index + 1) * n].to_vec())?;
        let ng = self.needs(ia);
        self.push("select", out, Op::Select { x: ia, index }, ng)
    }

    /// Column means of an `N×d` matrix, as `1×d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let av = &self.nodes[ia].value;
        let (rows, cols) = av.matrix_dims("mean_rows")?;
        let mut out = vec![F::zero(); cols];
        for row in av.data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = F::from_usize(rows).expect("rows").recip();
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(&[1, cols], out)?;
        let ng = self.needs(ia);
        self.push("mean_rows", out, Op::MeanRows(ia), ng)
    }

    /// Concatenates each 2×2 neighbourhood of an `(h·w)×d` token grid into
    /// one `4d` token, giving `(h/2·w/2)×4d`. Order within a window:
    /// `(0,0), (1,0), (0,1), (1,1)` as (row, col) offsets.
    pub fn merge_2x2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let xv = &self.nodes[ix].value;
        let (n, d) = xv.matrix_dims("merge_2x2")?;
        if n != h * w || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(Error::shape("merge_2x2", xv.shape(), &[h, w]));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..h2 {
            for j in 0..w2 {
                for (di, dj) in MERGE_ORDER {
                    let src = (2 * i + di) * w + 2 * j + dj;
                    out.extend_from_slice(&xv.data()[src * d..(src + 1) * d]);
                }
            }
        }
        let out = Tensor::new(&[h2 * w2, 4 * d], out)?;
        let ng = self.needs(ix);
        self.push("merge_2x2", out, Op::Merge2x2 { x: ix, h, w }, ng)
    }

    /// Scalar cross-entropy between `student` rows and the `teacher` target
    /// rows. The teacher side never receives a gradient.
    pub fn cross_entropy_rows(&mut self, student: Var, teacher: Var) -> Result<Var> {
        let (is, it) = (self.index(student)?, self.index(teacher)?);
        let loss = ops::cross_entropy_rows(&self.nodes[is].value, &self.nodes[it].value)?;
        let ng = self.needs(is);
        self.push(
            "cross_entropy_rows",
            Tensor::scalar(loss),
            Op::CrossEntropy { student: is, teacher: it },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        let ng = self.needs(ia);
        self.push("sum", out, Op::Sum(ia), ng)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every parameter on the tape gets a gradient, zero if the loss does
    /// not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = self.index(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::new(self.nodes[root].value.shape(), vec![F::one()])?);
        let mut params = Vec::new();

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else {
                if let Op::Param(name) = &node.op {
                    params.push((i, name.clone(), Tensor::zeros(node.value.shape())?));
                }
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut params)?;
        }
        // Parameters recorded after the loss cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(root + 1) {
            if let Op::Param(name) = &node.op {
                params.push((i, name.clone(), Tensor::zeros(node.value.shape())?));
            }
        }
        params.sort_by_key(|(i, _, _)| *i);
        Ok(Gradients {
            tape: self.id,
            entries: params,
        })
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        params: &mut Vec<(usize, String, Tensor<F>)>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |target: usize, t: Tensor<F>| -> Result<()> {
            if !self.nodes[target].needs_grad {
                return Ok(());
            }
            match &mut grads[target] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let val = |j: usize| &self.nodes[j].value;
        // Adds into part of a target gradient without materializing zeros
        // for the untouched part.
        let accumulate = |grads: &mut [Option<Tensor<F>>], target: usize, f: &mut dyn FnMut(&mut [F])| -> Result<()> {
            if !self.nodes[target].needs_grad {
                return Ok(());
            }
            let slot = match &mut grads[target] {
                Some(acc) => acc,
                slot @ None => slot.insert(Tensor::zeros(self.nodes[target].value.shape())?),
            };
            f(slot.data_mut());
            Ok(())
        };

        match &node.op {
            Op::Constant => {}
            Op::Param(name) => params.push((i, name.clone(), g)),
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).matrix_dims("matmul")?;
                let n = val(b).shape()[1];
                if self.needs(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(
                        g.data(),
                        Layout::Normal { rows: m, cols: n },
                        val(b).data(),
                        Layout::Transposed { rows: k, cols: n },
                        &mut da,
                        false,
                    );
                    send(a, Tensor::new(&[m, k], da)?)?;
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(
                        val(a).data(),
                        Layout::Transposed { rows: m, cols: k },
                        g.data(),
                        Layout::Normal { rows: m, cols: n },
                        &mut db,
                        false,
                    );
                    send(b, Tensor::new(&[k, n], db)?)?;
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = val(a).matrix_dims("matmul_nt")?;
                let n = val(b).shape()[0];
                if self.needs(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(
                        g.data(),
                        Layout::Normal { rows: m, cols: n },
                        val(b).data(),
                        Layout::Normal { rows: n, cols: k },
                        &mut da,
                        false,
                    );
                    send(a, Tensor::new(&[m, k], da)?)?;
                }
                if self.needs(b) {
                    let mut db = vec![F::zero(); n * k];
                    gemm(
                        g.data(),
                        Layout::Transposed { rows: m, cols: n },
                        val(a).data(),
                        Layout::Normal { rows: m, cols: k },
                        &mut db,
                        false,
                    );
                    send(b, Tensor::new(&[n, k], db)?)?;
                }
            }
            &Op::Add(a, b) => {
                send(a, g.clone())?;
                send(b, g)?;
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    send(a, g.zip_map(val(b), |x, y| x * y)?)?;
                }
                if self.needs(b) {
                    send(b, g.zip_map(val(a), |x, y| x * y)?)?;
                }
            }
            &Op::AddBias(a, bias) => {
                if self.needs(bias) {
                    let width = val(bias).len();
                    let mut db = vec![F::zero(); width];
                    for row in g.data().chunks(width) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    send(bias, Tensor::new(&[width], db)?)?;
                }
                send(a, g)?;
            }
            &Op::Scale(a, c) => send(a, g.scale(c))?,
            &Op::Softmax(a) => {
                let dx = ops::softmax_backward(&node.value, &g);
                send(a, Tensor::new(val(a).shape(), dx)?)?;
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (dx, dg, db) = ops::layer_norm_backward(val(*x), val(*gain), stats, &g);
                send(*x, Tensor::new(val(*x).shape(), dx)?)?;
                send(*gain, Tensor::new(val(*gain).shape(), dg)?)?;
                send(*bias, Tensor::new(val(*bias).shape(), db)?)?;
            }
            Op::Gelu(a, cdf) => {
                let a = *a;
                let dx = ops::gelu_backward(val(a), cdf, &g);
                send(a, Tensor::new(val(a).shape(), dx)?)?;
            }
            &Op::DepthwiseConv(x, k) => {
                let (dx, dk) = ops::depthwise_conv2d_backward(val(x), val(k), &g);
                send(x, Tensor::new(val(x).shape(), dx)?)?;
                send(k, Tensor::new(val(k).shape(), dk)?)?;
            }
            &Op::Reshape(a) => send(a, g.reshape(val(a).shape())?)?,
            &Op::SliceCols { x, start } => {
                let (_, cols) = val(x).matrix_dims("slice_cols")?;
                let width = node.value.shape()[1];
                accumulate(grads, x, &mut |dx| {
                    for (dst, src) in dx.chunks_mut(cols).zip(g.data().chunks(width)) {
                        for (d, &v) in dst[start..start + width].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                })?;
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (rows, w) = val(p).matrix_dims("concat_cols")?;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for row in g.data().chunks(total) {
                            dp.extend_from_slice(&row[offset..offset + w]);
                        }
                        send(p, Tensor::new(&[rows, w], dp)?)?;
                    }
                    offset += w;
                }
            }
            Op::Stack(parts) => {
                let inner = val(parts[0]).shape();
                let n = val(parts[0]).len();
                for (j, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        send(p, Tensor::new(inner, g.data()[j * n..(j + 1) * n].to_vec())?)?;
                    }
                }
            }
            &Op::Select { x, index } => {
                let n = node.value.len();
                accumulate(grads, x, &mut |dx| {
                    for (d, &v) in dx[index * n..(index + 1) * n].iter_mut().zip(g.data()) {
                        *d += v;
                    }
                })?;
            }
            &Op::MeanRows(a) => {
                let (rows, cols) = val(a).matrix_dims("mean_rows")?;
                let inv = F::from_usize(rows).expect("rows").recip();
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(g.data().iter().map(|&v| v * inv));
                }
                send(a, Tensor::new(&[rows, cols], dx)?)?;
            }
            &Op::Merge2x2 { x, h, w } => {
                let d = val(x).shape()[1];
                let (h2, w2) = (h / 2, w / 2);
                let mut dx = vec![F::zero(); val(x).len()];
                let gd = g.data();
                let mut cursor = 0;
                for i in 0..h2 {
                    for j in 0..w2 {
                        for (di, dj) in MERGE_ORDER {
                            let dst = (2 * i + di) * w + 2 * j + dj;
                            dx[dst * d..(dst + 1) * d].copy_from_slice(&gd[cursor..cursor + d]);
                            cursor += d;
                        }
                    }
                }
                send(x, Tensor::new(val(x).shape(), dx)?)?;
            }
            &Op::CrossEntropy { student, teacher } => {
                let ds = ops::cross_entropy_backward(val(student), val(teacher), g.item()?);
                send(student, Tensor::new(val(student).shape(), ds)?)?;
            }
            &Op::Sum(a) => {
                let gv = g.item()?;
                send(a, Tensor::full(val(a).shape(), gv)?)?;
            }
        }
        Ok(())
    }
}

const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Parameter gradients from one backward pass, in tape order.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    tape: u64,
    entries: Vec<(usize, String, Tensor<F>)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of one parameter use.
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.entries
            .binary_search_by_key(&v.index, |(i, _, _)| *i)
            .ok()
            .map(|pos| &self.entries[pos].2)
    }

    /// Gradient for `name`, summed over every use of that parameter.
    pub fn get(&self, name: &str) -> Option<Tensor<F>> {
        let mut acc: Option<Tensor<F>> = None;
        for (_, n, g) in &self.entries {
            if n == name {
                match &mut acc {
                    Some(a) => a.add_assign(g).expect("uses of one parameter share a shape"),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<F>> {
        let mut map: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (_, name, g) in self.entries {
            match map.get_mut(&name) {
                Some(acc) => acc.add_assign(&g).expect("uses of one parameter share a shape"),
                None => {
                    map.insert(name, g);
                }
            }
        }
        map
    }

    /// `(name, gradient)` per parameter use, in recording order.
    pub fn uses(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(_, n, g)| (n.as_str(), g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::from_fn(&[2, 3, 2], |i| i as f64).unwrap());
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap(), Tensor::ones(&[2, 3, 2]).unwrap());
    }

    #[test]
    fn matmul_sum_adjoint() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0).unwrap();
        let b = Tensor::from_fn(&[3, 4], |i| (i as f64).sin()).unwrap();
        let av = tape.param("a", a.clone());
        let bv = tape.param("b", b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ones = Tensor::<f64>::ones(&[2, 4]).unwrap();
        assert!(grads.get("a").unwrap().max_abs_diff(&ops::matmul_nt(&ones, &b).unwrap()).unwrap() < 1e-12);
        let at_ones = ops::matmul(&Tensor::ones(&[3, 2]).unwrap(), &ones).unwrap();
        // aᵀ·1 has every column equal to the row sums of aᵀ.
        let expect_b = Tensor::from_fn(&[3, 4], |i| (0..2).map(|r| a.at(&[r, i / 4])).sum()).unwrap();
        assert_eq!(at_ones.shape(), &[3, 4]);
        assert!(grads.get("b").unwrap().max_abs_diff(&expect_b).unwrap() < 1e-12);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", Tensor::ones(&[3]).unwrap());
        let unused = tape.param("unused", Tensor::ones(&[2, 2]).unwrap());
        let loss = tape.sum(x).unwrap();
        let late = tape.param("late", Tensor::ones(&[1]).unwrap());
        let map = tape.backward(loss).unwrap().into_map();
        assert_eq!(map["unused"], Tensor::zeros(&[2, 2]).unwrap());
        assert_eq!(map["late"], Tensor::zeros(&[1]).unwrap());
        let _ = (unused, late);
    }

    #[test]
    fn shared_name_accumulates_across_uses() {
        let mut tape = Tape::<f64>::new();
        let w = Tensor::full(&[2], 3.0).unwrap();
        let u1 = tape.param("w", w.clone());
        let u2 = tape.param("w", w);
        let s1 = tape.sum(u1).unwrap();
        let s2 = tape.scale(u2, 2.0).unwrap();
        let s2 = tape.sum(s2).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(u1).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.of(u2).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get("w").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn foreign_or_non_scalar_loss_is_usage_error() {
        let mut t1 = Tape::<f64>::new();
        let mut t2 = Tape::<f64>::new();
        let x = t1.param("x", Tensor::ones(&[2]).unwrap());
        let y = t2.param("y", Tensor::ones(&[2]).unwrap());
        let s = t2.sum(y).unwrap();
        assert!(matches!(t1.backward(s), Err(Error::Usage(_))));
        assert!(matches!(t1.backward(x), Err(Error::Usage(_))));
        assert!(matches!(t1.sum(s), Err(Error::Usage(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param("x", Tensor::ones(&[2]).unwrap());
        let d = tape.detach(x).unwrap();
        let loss = tape.sum(d).unwrap();
        assert_eq!(tape.backward(loss).unwrap().get("x").unwrap().sum(), 0.0);
    }

    #[test]
    fn finite_check_mode_rejects_overflow() {
        let mut tape = Tape::<f32>::new().with_finite_check(true);
        let x = tape.param("x", Tensor::full(&[2], 1e30).unwrap());
        assert!(matches!(tape.scale(x, 1e30), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn merge_2x2_layout() {
        let mut tape = Tape::<f64>::new();
        // 2×2 grid of 1-d tokens 0,1,2,3 (row-major).
        let x = tape.constant(Tensor::new(&[4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let m = tape.merge_2x2(x, 2, 2).unwrap();
        assert_eq!(tape.value(m).shape(), &[1, 4]);
        assert_eq!(tape.value(m).data(), &[0.0, 2.0, 1.0, 3.0]);
    }
}
