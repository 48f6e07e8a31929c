//! Weight multiplexing: share block weights across consecutive layers and
//! give each layer cheap private transformations.

mod compact;
mod plan;
mod transform;

pub use compact::{build_compact_model, mlp_transformed_forward, msa_transformed_forward, param_report, ParamReport};
pub use plan::{make_sharing_plan, ShareMode, SharingPlan};
pub(crate) use transform::delta_kernels;
pub use transform::{MlpTransform, MsaTransform, TransformConfig};
