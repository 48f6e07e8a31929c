//! Second phase of compression: train a compact student against a frozen
//! teacher.
//!
//! The objective combines soft-label cross-entropy on the logits with
//! cross-entropy between row-softmaxed relation matrices of the queries,
//! keys and values (nine pairings) and of the MLP outputs, paired layer by
//! layer. Optimization is AdamW with decoupled weight decay and a cosine
//! learning-rate schedule.

mod config;
mod loss;
mod optim;
mod relations;
mod train;

pub use config::{DistillConfig, LossWeights};
pub use loss::{
    attn_loss_on_tape, hddn_loss_on_tape, label_loss_on_tape, loss_attn, loss_hddn, loss_pred, loss_total,
    objective_on_tape, pred_loss_on_tape, LossComponents, LossTerms,
};
pub use optim::{AdamW, CosineSchedule, OptimConfig};
pub use relations::{relation_matrices, RelationSet};
pub use train::{
    evaluate, train_distill, train_distill_with, train_supervised, Dataset, EpochSummary, InMemoryDataset,
    StepRecord, TrainEvent, TrainLog,
};
