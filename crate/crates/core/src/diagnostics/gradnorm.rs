use serde::Serialize;

use crate::numerics::{Scalar, Tensor};
use crate::transformer::ModelLayout;

/// Labeled index sets over a flat list of gradient tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGrouping {
    pub labels: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

impl LayerGrouping {
    /// One entry per share group, indexed by parameter id: the group's shared
    /// block tensors (counted once) plus the norms and transformations of
    /// every member layer. Embedding, merge and head tensors belong to no group.
    pub fn share_groups(layout: &ModelLayout) -> Self {
        let mut keys: Vec<(usize, usize)> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for layer in &layout.layers {
            let key = (layer.stage, layer.group);
            let g = match keys.iter().position(|&k| k == key) {
                Some(g) => g,
                None => {
                    keys.push(key);
                    members.push(layer.block.all().to_vec());
                    keys.len() - 1
                }
            };
            members[g].extend([layer.norm1.0, layer.norm1.1, layer.norm2.0, layer.norm2.1]);
            members[g].extend(layer.attn_mix_post);
            members[g].extend(layer.attn_mix_pre);
            members[g].extend(layer.mlp_conv);
        }
        LayerGrouping {
            labels: (0..members.len()).map(|g| format!("g{g}")).collect(),
            members,
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Gradient norms of one training step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradNormTrace {
    pub step: usize,
    /// One norm per share group.
    pub groups: Vec<f64>,
    /// One norm per layer, from the gradient flowing through that layer's
    /// use of its (possibly shared) parameters.
    pub layers: Vec<f64>,
}

/// `√(Σ g²)` over the tensors of each group, accumulated in double precision
/// in member order.
pub fn grad_norm_per_layer<F: Scalar>(grads: &[Tensor<F>], grouping: &LayerGrouping) -> Vec<f64> {
    grouping
        .members
        .iter()
        .map(|ids| {
            ids.iter()
                .flat_map(|&i| grads[i].data())
                .map(|g| {
                    let g = g.to_f64_lossy();
                    g * g
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// `max / min` of a set of norms; infinite when the smallest is zero.
pub fn norm_spread(norms: &[f64]) -> f64 {
    let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}
