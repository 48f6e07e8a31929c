//! Run configuration: one TOML file describing the model, the compression
//! plan, both training phases, the synthetic data and where outputs go.
//!
//! Any field can be overridden by a dotted path (`optim.lr=0.01`), which is
//! what the `--section.field value` command-line flags turn into.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use minivit::distill::{DistillConfig, OptimConfig};
use minivit::multiplex::{ShareMode, TransformConfig};
use minivit::transformer::{ModelConfig, StageConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sharing: SharingConfig,
    pub transforms: TransformsConfig,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingKind {
    None,
    All,
    /// Consecutive groups of `k` layers.
    Every,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharingConfig {
    pub mode: SharingKind,
    /// Group size for `every`; ignored otherwise.
    pub k: usize,
}

impl Default for SharingConfig {
    fn default() -> Self {
        SharingConfig {
            mode: SharingKind::None,
            k: 2,
        }
    }
}

impl SharingConfig {
    pub fn share_mode(&self) -> ShareMode {
        match self.mode {
            SharingKind::None => ShareMode::EveryK(1),
            SharingKind::All => ShareMode::AllInStage,
            SharingKind::Every => ShareMode::EveryK(self.k),
        }
    }

    /// Parses `none`, `all`, `every-K` or a bare `K`.
    pub fn parse(s: &str) -> anyhow::Result<Self> {
        let mode: ShareMode = s.parse()?;
        Ok(match mode {
            ShareMode::AllInStage => SharingConfig {
                mode: SharingKind::All,
                ..Default::default()
            },
            ShareMode::EveryK(1) => SharingConfig::default(),
            ShareMode::EveryK(k) => SharingConfig {
                mode: SharingKind::Every,
                k,
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformsConfig {
    pub msa: bool,
    pub mlp: bool,
    /// Depth-wise kernel size.
    pub k_conv: usize,
}

impl Default for TransformsConfig {
    fn default() -> Self {
        TransformsConfig {
            msa: false,
            mlp: false,
            k_conv: 3,
        }
    }
}

impl TransformsConfig {
    pub fn to_transform_config(&self) -> TransformConfig {
        TransformConfig {
            msa: self.msa,
            mlp: self.mlp,
            kernel_size: self.k_conv,
        }
    }

    /// Parses `none`, `all`, `msa` or `mlp`, keeping the kernel size.
    pub fn parse(s: &str, k_conv: usize) -> anyhow::Result<Self> {
        let (msa, mlp) = match s.trim() {
            "none" => (false, false),
            "all" => (true, true),
            "msa" => (true, false),
            "mlp" => (false, true),
            other => bail!("unknown transform selection {other:?} (expected none, all, msa or mlp)"),
        };
        Ok(TransformsConfig { msa, mlp, k_conv })
    }
}

/// Synthetic gratings: sizes of both splits and the generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
    pub image_size: usize,
    pub classes: usize,
    pub noise_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            num_train: 20_000,
            num_test: 2_000,
            image_size: 32,
            classes: 10,
            noise_sigma: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory for outputs whose path is not given on the command line.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

impl Default for RunConfig {
    /// The desk-scale setup: an 8-layer, 64-wide teacher on 32×32 gratings.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::isotropic(
                32,
                4,
                1,
                10,
                StageConfig {
                    num_layers: 8,
                    embed_dim: 64,
                    num_heads: 4,
                    mlp_dim: 128,
                    merge_tokens: false,
                },
            ),
            sharing: SharingConfig::default(),
            transforms: TransformsConfig::default(),
            distill: DistillConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing run configuration")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        toml::to_string(self).context("serializing run configuration")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies `path=value` overrides. The path must name an existing field;
    /// the value is read as a TOML literal and falls back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> anyhow::Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).context("serializing run configuration")?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .with_context(|| format!("override {item:?} is not of the form path=value"))?;
            let slot = lookup_mut(&mut root, path.trim())?;
            *slot = parse_literal(raw.trim());
        }
        let cfg: RunConfig = root
            .try_into()
            .with_context(|| format!("applying overrides {:?}", overrides.iter().map(AsRef::as_ref).collect::<Vec<_>>()))?;
        Ok(cfg)
    }

    /// Checks everything except the data section.
    pub fn validate_architecture(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.transforms.to_transform_config().validate()?;
        self.distill.validate()?;
        self.optim.validate()?;
        if self.sharing.mode == SharingKind::Every && self.sharing.k == 0 {
            bail!("sharing.k must be at least 1");
        }
        Ok(())
    }

    /// Checks every section and the agreement between data and model.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.validate_architecture()?;
        let d = &self.data;
        if d.classes < 2 {
            bail!("data.classes must be at least 2, got {}", d.classes);
        }
        if d.image_size < 8 {
            bail!("data.image_size must be at least 8, got {}", d.image_size);
        }
        if !(d.noise_sigma.is_finite() && d.noise_sigma >= 0.0) {
            bail!("data.noise_sigma must be a non-negative number, got {}", d.noise_sigma);
        }
        if d.image_size != self.model.image_size {
            bail!(
                "data.image_size {} differs from model.image_size {}",
                d.image_size,
                self.model.image_size
            );
        }
        if d.classes != self.model.num_classes {
            bail!("data.classes {} differs from model.num_classes {}", d.classes, self.model.num_classes);
        }
        if self.model.in_channels != 1 {
            bail!("synthetic images have one channel, model.in_channels is {}", self.model.in_channels);
        }
        Ok(())
    }
}

fn lookup_mut<'a>(root: &'a mut toml::Value, path: &str) -> anyhow::Result<&'a mut toml::Value> {
    let mut node = root;
    for key in path.split('.') {
        node = match node {
            toml::Value::Table(t) => t.get_mut(key),
            toml::Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .with_context(|| format!("unknown configuration field {path:?}"))?;
    }
    Ok(node)
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Holder {
        v: toml::Value,
    }
    match toml::from_str::<Holder>(&format!("v = {raw}")) {
        Ok(h) => h.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
