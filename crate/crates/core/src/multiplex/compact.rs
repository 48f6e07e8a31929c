use serde::Serialize;

use super::plan::SharingPlan;
use super::transform::{MlpTransform, MsaTransform, TransformConfig};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::transformer::{
    attention_values, mlp_values, AttentionCapture, AttentionWeights, MlpWeights, ModelConfig, ModelLayout, ParamRole,
    VisionTransformer,
};

/// Attention with per-layer head mixing around the softmax.
pub fn msa_transformed_forward<F: Scalar>(
    z: &Tensor<F>,
    shared: &AttentionWeights<Tensor<F>>,
    t: &MsaTransform<F>,
) -> Result<(Tensor<F>, AttentionCapture<Tensor<F>>)> {
    let heads = t.heads();
    t.validate(heads)?;
    attention_values(z, shared, heads, Some((&t.post, &t.pre)))
}

/// MLP on the depth-wise convolved input grid (`N == h·w`, row-major).
pub fn mlp_transformed_forward<F: Scalar>(
    y: &Tensor<F>,
    shared: &MlpWeights<Tensor<F>>,
    t: &MlpTransform<F>,
    grid: (usize, usize),
) -> Result<Tensor<F>> {
    mlp_values(y, shared, Some((&t.kernels, grid.0, grid.1)))
}

/// Compact student for `cfg` under `plan`.
///
/// Head-mixing matrices start at the identity and depth-wise kernels at the
/// centre tap, so a fresh student computes exactly what plain weight sharing
/// computes. With a teacher, each share group takes the block weights of its
/// first layer, and norms, embeddings, merges and the head are copied
/// verbatim; without one, everything is drawn from `seed`.
pub fn build_compact_model<F: Scalar>(
    cfg: &ModelConfig,
    plan: &SharingPlan,
    transforms: &TransformConfig,
    teacher: Option<&VisionTransformer<F>>,
    seed: u64,
) -> Result<VisionTransformer<F>> {
    let mut student = VisionTransformer::init(cfg, plan, transforms, seed)?;
    let Some(teacher) = teacher else {
        return Ok(student);
    };
    if teacher.config() != cfg {
        return Err(Error::config("teacher architecture differs from the student configuration"));
    }
    let s_layout = student.layout().clone();
    let t_layout = teacher.layout();
    for (id, spec) in s_layout.specs.iter().enumerate() {
        let source = match spec.role {
            ParamRole::Transform { .. } => continue,
            ParamRole::Block { stage, group } => {
                let first = plan.stages[stage][group][0];
                let s_layer = s_layout
                    .layers
                    .iter()
                    .find(|l| l.stage == stage && l.local == first)
                    .expect("plan covers every layer");
                let t_layer = t_layout
                    .layers
                    .iter()
                    .find(|l| l.stage == stage && l.local == first)
                    .expect("same architecture");
                let slot = s_layer.block.all().iter().position(|&p| p == id).expect("block tensor");
                t_layer.block.all()[slot]
            }
            _ => t_layout
                .find(&spec.name)
                .ok_or_else(|| Error::config(format!("teacher has no parameter {}", spec.name)))?,
        };
        *student.param_mut(id) = teacher.param(source).clone();
    }
    Ok(student)
}

/// Parameter accounting of a (possibly) compact model against the
/// unshared, untransformed model of the same architecture.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    /// Shared attention/MLP weights, counted once per group.
    pub shared: usize,
    /// Per-layer LayerNorm parameters.
    pub unshared_norm: usize,
    /// Per-layer transformation parameters.
    pub unshared_transform: usize,
    /// Embedding, token merging and classifier parameters.
    pub embed_head: usize,
    pub total: usize,
    pub num_groups: usize,
    /// Block parameters of the unshared model.
    pub baseline_blocks: usize,
    pub baseline_total: usize,
    /// `baseline_blocks / (shared + unshared_norm + unshared_transform)`.
    pub block_ratio: f64,
    /// `baseline_total / total`.
    pub total_ratio: f64,
}

pub fn param_report(cfg: &ModelConfig, plan: &SharingPlan, transforms: &TransformConfig) -> Result<ParamReport> {
    let count = ModelLayout::new(cfg, plan, transforms)?.count();
    let base = ModelLayout::new(cfg, &SharingPlan::identity(cfg), &TransformConfig::none())?.count();
    let blocks = count.blocks() + count.transform;
    Ok(ParamReport {
        shared: count.block_shared,
        unshared_norm: count.block_norm,
        unshared_transform: count.transform,
        embed_head: count.embed + count.merge + count.head,
        total: count.total(),
        num_groups: plan.num_groups(),
        baseline_blocks: base.blocks(),
        baseline_total: base.total(),
        block_ratio: base.blocks() as f64 / blocks as f64,
        total_ratio: base.total() as f64 / count.total() as f64,
    })
}

impl<F: Scalar> VisionTransformer<F> {
    pub fn param_report(&self) -> ParamReport {
        param_report(self.config(), self.plan(), self.transforms()).expect("layout already validated")
    }
}
