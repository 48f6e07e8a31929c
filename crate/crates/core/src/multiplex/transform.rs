use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Which per-layer weight transformations a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Head-mixing matrices before and after the attention softmax.
    #[serde(default)]
    pub msa: bool,
    /// Depth-wise convolution on the MLP input.
    #[serde(default)]
    pub mlp: bool,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
}

fn default_kernel_size() -> usize {
    3
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl TransformConfig {
    pub fn none() -> Self {
        TransformConfig {
            msa: false,
            mlp: false,
            kernel_size: default_kernel_size(),
        }
    }

    pub fn all(kernel_size: usize) -> Self {
        TransformConfig {
            msa: true,
            mlp: true,
            kernel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "depth-wise kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Extra parameters per layer with `heads` heads and width `dim`.
    pub fn params_per_layer(&self, heads: usize, dim: usize) -> usize {
        let msa = if self.msa { 2 * heads * heads } else { 0 };
        let mlp = if self.mlp { self.kernel_size * self.kernel_size * dim } else { 0 };
        msa + mlp
    }
}

/// Head-mixing matrices of one layer: `post` (F1) acts on attention maps
/// after the softmax, `pre` (F2) on the logits before it.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaTransform<F> {
    pub post: Tensor<F>,
    pub pre: Tensor<F>,
}

impl<F: Scalar> MsaTransform<F> {
    pub fn identity(heads: usize) -> Result<Self> {
        Ok(MsaTransform {
            post: Tensor::eye(heads)?,
            pre: Tensor::eye(heads)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.post.shape()[0]
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        for t in [&self.post, &self.pre] {
            if t.shape() != [heads, heads] {
                return Err(Error::shape("msa_transform", t.shape(), &[heads, heads]));
            }
        }
        Ok(())
    }
}

/// Per-channel `K×K` kernels applied to the MLP input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTransform<F> {
    pub kernels: Tensor<F>,
}

impl<F: Scalar> MlpTransform<F> {
    /// Centre tap 1, all others 0: the identity map.
    pub fn delta(kernel_size: usize, dim: usize) -> Result<Self> {
        Ok(MlpTransform {
            kernels: delta_kernels(kernel_size, dim)?,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[0]
    }
}

pub(crate) fn delta_kernels<F: Scalar>(kernel_size: usize, dim: usize) -> Result<Tensor<F>> {
    if kernel_size.is_multiple_of(2) {
        return Err(Error::config(format!("depth-wise kernel size {kernel_size} must be odd")));
    }
    let centre = (kernel_size / 2) * kernel_size + kernel_size / 2;
    Tensor::from_fn(&[kernel_size, kernel_size, dim], |i| {
        if i / dim == centre {
            F::one()
        } else {
            F::zero()
        }
    })
}
