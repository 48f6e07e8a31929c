//! Vision transformer: patch embedding, pre-norm attention/MLP blocks,
//! optional token merging between stages, average-pool classifier.

mod blocks;
mod config;
mod layout;
mod model;

pub use blocks::{attention, mlp, mlp_forward, msa_forward, patch_embed, patchify, AttentionCapture, HeadMixing};
pub(crate) use blocks::{attention_values, mlp_values};
pub use config::{ModelConfig, StageConfig};
pub use layout::{
    count_params, AttentionWeights, BlockIds, EmbedIds, HeadIds, Init, LayerIds, MlpWeights, ModelLayout, ParamCount,
    ParamId, ParamRole, ParamSpec,
};
pub use model::{Binding, CaptureSet, ForwardOptions, LayerCapture, ParamUse, TapeForward, VisionTransformer};
