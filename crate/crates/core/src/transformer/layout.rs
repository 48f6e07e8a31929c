//! Parameter inventory of a model: every tensor, its shape and role, and
//! which layers use it.

use std::collections::BTreeMap;

use serde::Serialize;

use super::config::ModelConfig;
use crate::error::Result;
use crate::multiplex::{SharingPlan, TransformConfig};

/// Index into a model's parameter list.
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Patch projection and positional table.
    Embed,
    /// Attention/MLP weights of share group `group` of `stage`.
    Block { stage: usize, group: usize },
    /// Per-layer LayerNorm (never shared). `layer` is the global layer index.
    Norm { layer: usize },
    /// Per-layer head mixing or depth-wise kernels.
    Transform { layer: usize },
    /// Token-merging projection at the entry of `stage`.
    Merge { stage: usize },
    /// Final LayerNorm and classifier.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal at two standard deviations.
    Normal(f32),
    Identity,
    /// Centre-tap depth-wise kernel.
    Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub init: Init,
    /// Receives decoupled weight decay (linear weight matrices only).
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Attention projections, `x·W + b` convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionWeights<T> {
    pub q_weight: T,
    pub q_bias: T,
    pub k_weight: T,
    pub k_bias: T,
    pub v_weight: T,
    pub v_bias: T,
    pub proj_weight: T,
    pub proj_bias: T,
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            q_weight: f(&self.q_weight),
            q_bias: f(&self.q_bias),
            k_weight: f(&self.k_weight),
            k_bias: f(&self.k_bias),
            v_weight: f(&self.v_weight),
            v_bias: f(&self.v_bias),
            proj_weight: f(&self.proj_weight),
            proj_bias: f(&self.proj_bias),
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<AttentionWeights<U>, E> {
        Ok(AttentionWeights {
            q_weight: f(&self.q_weight)?,
            q_bias: f(&self.q_bias)?,
            k_weight: f(&self.k_weight)?,
            k_bias: f(&self.k_bias)?,
            v_weight: f(&self.v_weight)?,
            v_bias: f(&self.v_bias)?,
            proj_weight: f(&self.proj_weight)?,
            proj_bias: f(&self.proj_bias)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpWeights<T> {
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

impl<T> MlpWeights<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MlpWeights<U> {
        MlpWeights {
            fc1_weight: f(&self.fc1_weight),
            fc1_bias: f(&self.fc1_bias),
            fc2_weight: f(&self.fc2_weight),
            fc2_bias: f(&self.fc2_bias),
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<MlpWeights<U>, E> {
        Ok(MlpWeights {
            fc1_weight: f(&self.fc1_weight)?,
            fc1_bias: f(&self.fc1_bias)?,
            fc2_weight: f(&self.fc2_weight)?,
            fc2_bias: f(&self.fc2_bias)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub attn: AttentionWeights<ParamId>,
    pub mlp: MlpWeights<ParamId>,
}

impl BlockIds {
    pub fn all(&self) -> [ParamId; 12] {
        let (a, m) = (&self.attn, &self.mlp);
        [
            a.q_weight,
            a.q_bias,
            a.k_weight,
            a.k_bias,
            a.v_weight,
            a.v_bias,
            a.proj_weight,
            a.proj_bias,
            m.fc1_weight,
            m.fc1_bias,
            m.fc2_weight,
            m.fc2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIds {
    pub stage: usize,
    /// Index within the stage.
    pub local: usize,
    /// Stage-local share group.
    pub group: usize,
    pub block: BlockIds,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    /// Head mixing after the softmax (F1).
    pub attn_mix_post: Option<ParamId>,
    /// Head mixing before the softmax (F2).
    pub attn_mix_pre: Option<ParamId>,
    pub mlp_conv: Option<ParamId>,
}

impl LayerIds {
    /// Every parameter this layer reads, shared ones included.
    pub fn all(&self) -> Vec<ParamId> {
        let mut ids = self.block.all().to_vec();
        ids.extend([self.norm1.0, self.norm1.1, self.norm2.0, self.norm2.1]);
        ids.extend(self.attn_mix_post);
        ids.extend(self.attn_mix_pre);
        ids.extend(self.mlp_conv);
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pos: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadIds {
    pub norm: (ParamId, ParamId),
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Full parameter inventory derived from architecture, sharing plan and
/// transformation toggles. Layers of one share group hold identical
/// [`BlockIds`], which is how aliasing is expressed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub specs: Vec<ParamSpec>,
    pub embed: EmbedIds,
    /// Global forward order.
    pub layers: Vec<LayerIds>,
    /// Merge projection per stage, `None` where no merging happens.
    pub merges: Vec<Option<(ParamId, ParamId)>>,
    pub head: HeadIds,
}

const INIT_STD: f32 = 0.02;

impl ModelLayout {
    pub fn new(cfg: &ModelConfig, plan: &SharingPlan, transforms: &TransformConfig) -> Result<Self> {
        cfg.validate()?;
        plan.validate(cfg)?;
        transforms.validate()?;

        let mut specs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, role: ParamRole, init: Init, decay: bool| -> ParamId {
            specs.push(ParamSpec {
                name,
                shape,
                role,
                init,
                decay,
            });
            specs.len() - 1
        };

        let d0 = cfg.stages[0].embed_dim;
        let embed = EmbedIds {
            weight: add(
                "patch_embed.weight".into(),
                vec![cfg.patch_dim(), d0],
                ParamRole::Embed,
                Init::Normal(INIT_STD),
                true,
            ),
            bias: add("patch_embed.bias".into(), vec![d0], ParamRole::Embed, Init::Zeros, false),
            pos: add(
                "pos_embed".into(),
                vec![cfg.num_patches(), d0],
                ParamRole::Embed,
                Init::Normal(INIT_STD),
                false,
            ),
        };

        let mut layers = Vec::with_capacity(cfg.total_layers());
        let mut merges = Vec::with_capacity(cfg.stages.len());
        for (s, stage) in cfg.stages.iter().enumerate() {
            let d = stage.embed_dim;
            if s > 0 && stage.merge_tokens {
                let prev = cfg.stages[s - 1].embed_dim;
                let role = ParamRole::Merge { stage: s };
                let w = add(
                    format!("stage{s}.merge.weight"),
                    vec![4 * prev, d],
                    role,
                    Init::Normal(INIT_STD),
                    true,
                );
                let b = add(format!("stage{s}.merge.bias"), vec![d], role, Init::Zeros, false);
                merges.push(Some((w, b)));
            } else {
                merges.push(None);
            }

            for (g, members) in plan.stages[s].iter().enumerate() {
                let role = ParamRole::Block { stage: s, group: g };
                let mut linear = |part: &str, rows: usize, cols: usize| -> (ParamId, ParamId) {
                    let w = add(
                        format!("stage{s}.block{g}.{part}.weight"),
                        vec![rows, cols],
                        role,
                        Init::Normal(INIT_STD),
                        true,
                    );
                    let b = add(format!("stage{s}.block{g}.{part}.bias"), vec![cols], role, Init::Zeros, false);
                    (w, b)
                };
                let (q_weight, q_bias) = linear("attn.q", d, d);
                let (k_weight, k_bias) = linear("attn.k", d, d);
                let (v_weight, v_bias) = linear("attn.v", d, d);
                let (proj_weight, proj_bias) = linear("attn.proj", d, d);
                let (fc1_weight, fc1_bias) = linear("mlp.fc1", d, stage.mlp_dim);
                let (fc2_weight, fc2_bias) = linear("mlp.fc2", stage.mlp_dim, d);
                let block = BlockIds {
                    attn: AttentionWeights {
                        q_weight,
                        q_bias,
                        k_weight,
                        k_bias,
                        v_weight,
                        v_bias,
                        proj_weight,
                        proj_bias,
                    },
                    mlp: MlpWeights {
                        fc1_weight,
                        fc1_bias,
                        fc2_weight,
                        fc2_bias,
                    },
                };

                for &l in members {
                    let global = layers.len();
                    let prefix = format!("stage{s}.layer{l}");
                    let norm_role = ParamRole::Norm { layer: global };
                    let mut norm = |which: &str| {
                        (
                            add(format!("{prefix}.{which}.gain"), vec![d], norm_role, Init::Ones, false),
                            add(format!("{prefix}.{which}.bias"), vec![d], norm_role, Init::Zeros, false),
                        )
                    };
                    let norm1 = norm("norm1");
                    let norm2 = norm("norm2");
                    let t_role = ParamRole::Transform { layer: global };
                    let m = stage.num_heads;
                    let (attn_mix_post, attn_mix_pre) = if transforms.msa {
                        (
                            Some(add(format!("{prefix}.attn_mix.post"), vec![m, m], t_role, Init::Identity, false)),
                            Some(add(format!("{prefix}.attn_mix.pre"), vec![m, m], t_role, Init::Identity, false)),
                        )
                    } else {
                        (None, None)
                    };
                    let k = transforms.kernel_size;
                    let mlp_conv = transforms
                        .mlp
                        .then(|| add(format!("{prefix}.mlp_conv.kernel"), vec![k, k, d], t_role, Init::Delta, false));
                    layers.push(LayerIds {
                        stage: s,
                        local: l,
                        group: g,
                        block,
                        norm1,
                        norm2,
                        attn_mix_post,
                        attn_mix_pre,
                        mlp_conv,
                    });
                }
            }
        }

        let d_last = cfg.stages.last().expect("validated").embed_dim;
        let head = HeadIds {
            norm: (
                add("norm.gain".into(), vec![d_last], ParamRole::Head, Init::Ones, false),
                add("norm.bias".into(), vec![d_last], ParamRole::Head, Init::Zeros, false),
            ),
            weight: add(
                "head.weight".into(),
                vec![d_last, cfg.num_classes],
                ParamRole::Head,
                Init::Normal(INIT_STD),
                true,
            ),
            bias: add("head.bias".into(), vec![cfg.num_classes], ParamRole::Head, Init::Zeros, false),
        };

        Ok(ModelLayout {
            specs,
            embed,
            layers,
            merges,
            head,
        })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for spec in &self.specs {
            let n = spec.numel();
            match spec.role {
                ParamRole::Embed => c.embed += n,
                ParamRole::Block { .. } => c.block_shared += n,
                ParamRole::Norm { .. } => c.block_norm += n,
                ParamRole::Transform { .. } => c.transform += n,
                ParamRole::Merge { .. } => c.merge += n,
                ParamRole::Head => c.head += n,
            }
        }
        c
    }
}

/// Parameter totals by role. Shared tensors are counted once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embed: usize,
    /// Attention and MLP weights (stored once per share group).
    pub block_shared: usize,
    /// Per-layer LayerNorms.
    pub block_norm: usize,
    pub transform: usize,
    pub merge: usize,
    pub head: usize,
}

impl ParamCount {
    /// Transformer-block parameters: shared weights plus per-layer norms.
    pub fn blocks(&self) -> usize {
        self.block_shared + self.block_norm
    }

    pub fn total(&self) -> usize {
        self.embed + self.block_shared + self.block_norm + self.transform + self.merge + self.head
    }

    pub fn by_group(&self) -> BTreeMap<&'static str, usize> {
        BTreeMap::from([
            ("embed", self.embed),
            ("block_shared", self.block_shared),
            ("block_norm", self.block_norm),
            ("transform", self.transform),
            ("merge", self.merge),
            ("head", self.head),
            ("total", self.total()),
        ])
    }
}

/// Counts from the layout alone; nothing is allocated.
pub fn count_params(cfg: &ModelConfig, plan: &SharingPlan, transforms: &TransformConfig) -> Result<ParamCount> {
    Ok(ModelLayout::new(cfg, plan, transforms)?.count())
}
