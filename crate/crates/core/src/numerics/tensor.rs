use std::fmt;
use std::sync::Arc;

use super::{DType, Scalar};
use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Dense row-major array of rank at most four.
///
/// Storage is reference counted, so cloning a tensor (for example when a
/// parameter is placed on a gradient tape) does not copy the data. Mutation
/// goes through [`Tensor::data_mut`], which copies only if the buffer is
/// still shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        Self::from_fn(shape, |_| value)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, F::one())
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    /// Row-major matrix from nested rows; convenient in tests.
    pub fn from_rows(rows: &[&[F]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { F::one() } else { F::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        F::DTYPE
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// True when both tensors view the same buffer.
    pub fn shares_storage(&self, other: &Tensor<F>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> F {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of extent {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect()),
        })
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|x| x * c)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn norm_l2(&self) -> F {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> Result<F> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max))
    }

    /// Fails with [`Error::NonFinite`] on the first NaN or infinity.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| G::from_f64_lossy(x.to_f64_lossy())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    /// Index of the largest element (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::config(format!("tensor rank {} exceeds {MAX_RANK}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::config(format!("tensor shape {shape:?} has a zero extent")));
    }
    Ok(())
}

impl<F: fmt::Debug> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} [", std::any::type_name::<F>(), self.shape)?;
        for (i, x) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{x:?}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
