use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::ModelConfig;

/// How layers of a stage are grouped onto shared weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShareMode {
    /// Consecutive groups of `K` layers; a shorter trailing group takes the
    /// remainder. `EveryK(1)` is no sharing.
    EveryK(usize),
    AllInStage,
}

impl FromStr for ShareMode {
    type Err = Error;

    /// Accepts `none`, `all`, `every-K` or a bare `K`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" => Ok(ShareMode::EveryK(1)),
            "all" | "all-in-stage" => Ok(ShareMode::AllInStage),
            _ => s
                .strip_prefix("every-")
                .unwrap_or(s)
                .parse::<usize>()
                .map(ShareMode::EveryK)
                .map_err(|_| Error::config(format!("unknown sharing mode {s:?}"))),
        }
    }
}

impl fmt::Display for ShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShareMode::EveryK(1) => write!(f, "none"),
            ShareMode::EveryK(k) => write!(f, "every-{k}"),
            ShareMode::AllInStage => write!(f, "all"),
        }
    }
}

/// Partition of each stage's layers into share groups.
///
/// Every layer of a group runs with the same block weights (attention and
/// MLP). Per-layer parameters listed in [`SharingPlan::UNSHARED_PER_LAYER`]
/// are never shared. Groups never span two stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPlan {
    /// `stages[s][g]` lists the stage-local layer indices of group `g`.
    pub stages: Vec<Vec<Vec<usize>>>,
}

impl SharingPlan {
    pub const UNSHARED_PER_LAYER: [&'static str; 4] = [
        "layer_norm",
        "attn_mix_post_softmax",
        "attn_mix_pre_softmax",
        "mlp_depthwise_kernel",
    ];

    /// One group per layer.
    pub fn identity(cfg: &ModelConfig) -> Self {
        SharingPlan {
            stages: cfg
                .stages
                .iter()
                .map(|st| (0..st.num_layers).map(|l| vec![l]).collect())
                .collect(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    /// Checks that the plan partitions each stage of `cfg` into consecutive groups.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.stages.len() != cfg.stages.len() {
            return Err(Error::config(format!(
                "plan has {} stages, model has {}",
                self.stages.len(),
                cfg.stages.len()
            )));
        }
        for (s, (groups, stage)) in self.stages.iter().zip(&cfg.stages).enumerate() {
            let flat: Vec<usize> = groups.iter().flatten().copied().collect();
            if groups.iter().any(Vec::is_empty) || flat != (0..stage.num_layers).collect::<Vec<_>>() {
                return Err(Error::config(format!(
                    "stage {s}: groups {groups:?} do not partition layers 0..{} in order",
                    stage.num_layers
                )));
            }
        }
        Ok(())
    }

    /// Stage-local group index of `layer` in stage `stage`.
    pub fn group_of(&self, stage: usize, layer: usize) -> Option<usize> {
        self.stages
            .get(stage)?
            .iter()
            .position(|g| g.contains(&layer))
    }
}

pub fn make_sharing_plan(cfg: &ModelConfig, mode: ShareMode) -> Result<SharingPlan> {
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (s, stage) in cfg.stages.iter().enumerate() {
        let k = match mode {
            ShareMode::AllInStage => stage.num_layers,
            ShareMode::EveryK(0) => return Err(Error::config("sharing group size must be at least 1")),
            ShareMode::EveryK(k) if k > stage.num_layers => {
                return Err(Error::config(format!(
                    "sharing group size {k} exceeds the {} layers of stage {s}",
                    stage.num_layers
                )))
            }
            ShareMode::EveryK(k) => k,
        };
        let layers: Vec<usize> = (0..stage.num_layers).collect();
        stages.push(layers.chunks(k).map(<[usize]>::to_vec).collect());
    }
    Ok(SharingPlan { stages })
}
