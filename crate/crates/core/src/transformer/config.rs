use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One run of layers with identical dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Merge 2×2 token neighbourhoods at stage entry. Ignored for stage 0.
    #[serde(default)]
    pub merge_tokens: bool,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub drop_path_rate: f64,
    pub stages: Vec<StageConfig>,
}

impl ModelConfig {
    /// Single-stage isotropic model (DeiT-style).
    pub fn isotropic(
        image_size: usize,
        patch_size: usize,
        in_channels: usize,
        num_classes: usize,
        stage: StageConfig,
    ) -> Self {
        ModelConfig {
            image_size,
            patch_size,
            in_channels,
            num_classes,
            drop_path_rate: 0.0,
            stages: vec![stage],
        }
    }

    /// DeiT-B dimensions at 224² with 16² patches and 1000 classes.
    pub fn deit_base() -> Self {
        Self::isotropic(
            224,
            16,
            3,
            1000,
            StageConfig {
                num_layers: 12,
                embed_dim: 768,
                num_heads: 12,
                mlp_dim: 3072,
                merge_tokens: false,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("in_channels and num_classes must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::config("at least one stage is required"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::config("drop_path_rate must lie in [0, 1)"));
        }
        let mut side = self.image_size / self.patch_size;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.num_layers == 0 || stage.embed_dim == 0 || stage.num_heads == 0 {
                return Err(Error::config(format!("stage {s} has an empty dimension")));
            }
            if stage.embed_dim % stage.num_heads != 0 {
                return Err(Error::config(format!(
                    "stage {s}: embed_dim {} is not divisible by {} heads",
                    stage.embed_dim, stage.num_heads
                )));
            }
            if stage.mlp_dim < stage.embed_dim {
                return Err(Error::config(format!(
                    "stage {s}: mlp_dim {} is smaller than embed_dim {}",
                    stage.mlp_dim, stage.embed_dim
                )));
            }
            if s > 0 && stage.merge_tokens {
                if !side.is_multiple_of(2) {
                    return Err(Error::config(format!("stage {s}: cannot merge a {side}×{side} token grid")));
                }
                side /= 2;
            } else if s > 0 && stage.embed_dim != self.stages[s - 1].embed_dim {
                return Err(Error::config(format!(
                    "stage {s} changes width without token merging"
                )));
            }
        }
        Ok(())
    }

    /// Token-grid side length seen by each stage.
    pub fn grid_sides(&self) -> Vec<usize> {
        let mut side = self.image_size / self.patch_size;
        self.stages
            .iter()
            .enumerate()
            .map(|(s, st)| {
                if s > 0 && st.merge_tokens {
                    side /= 2;
                }
                side
            })
            .collect()
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn total_layers(&self) -> usize {
        self.stages.iter().map(|s| s.num_layers).sum()
    }

    /// `(stage, layer-within-stage)` for every layer in forward order.
    pub fn layer_positions(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (0..st.num_layers).map(move |l| (s, l)))
            .collect()
    }
}
