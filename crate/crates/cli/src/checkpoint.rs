//! Binary checkpoint format.
//!
//! ```text
//! "MVC1" | header length (u64 LE) | JSON header | zero padding | payload
//! ```
//!
//! The header lists every parameter tensor once, in layout order, with its
//! shape, dtype (`f32`), offset and byte length. Offsets are relative to the
//! payload, which starts at the first 64-byte boundary after the header, and
//! every offset is a multiple of 64. Tensor data is little-endian IEEE-754.
//! The header also carries the run configuration and the sharing plan, from
//! which loading rebuilds the model and therefore the sharing aliases:
//! layers of one group refer to the single stored tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use minivit::multiplex::{make_sharing_plan, SharingPlan};
use minivit::numerics::Tensor;
use minivit::transformer::{ModelLayout, VisionTransformer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"MVC1";
pub const FORMAT_VERSION: u64 = 1;
pub const ALIGN: usize = 64;
const PREFIX: usize = MAGIC.len() + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),

    #[error("truncated checkpoint: need {needed} bytes, file has {actual}")]
    Truncated { needed: u64, actual: u64 },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u64),

    #[error("stored tensors do not match the sharing plan: {0}")]
    AliasInconsistency(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Model(#[from] minivit::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub run: RunConfig,
    pub plan: SharingPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u64,
    pub tensors: Vec<TensorEntry>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VisionTransformer<f32>,
    pub run: RunConfig,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes `model` with `run` as metadata. `run` must describe the model:
/// its sharing and transform sections are what loading rebuilds from.
pub fn encode(model: &VisionTransformer<f32>, run: &RunConfig) -> Result<Vec<u8>> {
    check_description(model, run)?;
    let mut tensors = Vec::with_capacity(model.params().len());
    let mut offset = 0usize;
    for (id, t) in model.params().iter().enumerate() {
        let byte_len = t.len() * 4;
        tensors.push(TensorEntry {
            name: model.param_name(id).to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: offset as u64,
            byte_len: byte_len as u64,
        });
        offset = align_up(offset + byte_len);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        tensors,
        metadata: Metadata {
            run: run.clone(),
            plan: model.plan().clone(),
        },
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let data_start = align_up(PREFIX + json.len());
    let end = header.tensors.last().map_or(0, |e| (e.offset + e.byte_len) as usize);

    let mut out = Vec::with_capacity(data_start + end);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start, 0);
    for (entry, t) in header.tensors.iter().zip(model.params()) {
        out.resize(data_start + entry.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn check_description(model: &VisionTransformer<f32>, run: &RunConfig) -> Result<()> {
    let inconsistent = |what: &str| Err(CheckpointError::AliasInconsistency(what.to_string()));
    if &run.model != model.config() {
        return inconsistent("run configuration describes a different model");
    }
    if &run.transforms.to_transform_config() != model.transforms() {
        return inconsistent("run configuration names different transformations");
    }
    if &make_sharing_plan(model.config(), run.sharing.share_mode())? != model.plan() {
        return inconsistent("run configuration names a different sharing plan");
    }
    Ok(())
}

/// Parses a checkpoint. Nothing is returned unless the whole file checks out.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let actual = bytes.len() as u64;
    let truncated = |needed: usize| CheckpointError::Truncated {
        needed: needed as u64,
        actual,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(MAGIC.len())].to_vec()));
    }
    if bytes.len() < PREFIX {
        return Err(truncated(PREFIX));
    }
    let header_len = u64::from_le_bytes(bytes[MAGIC.len()..PREFIX].try_into().expect("8 bytes"));
    let header_end = PREFIX
        .checked_add(usize::try_from(header_len).map_err(|_| truncated(usize::MAX))?)
        .ok_or_else(|| truncated(usize::MAX))?;
    if bytes.len() < header_end {
        return Err(truncated(header_end));
    }

    // The version is read on its own first so that a future layout with a
    // different header schema reports as a version problem.
    #[derive(Deserialize)]
    struct Version {
        format_version: u64,
    }
    let header_bytes = &bytes[PREFIX..header_end];
    let version: Version =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
    if version.format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version.format_version));
    }
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;

    let data_start = align_up(header_end);
    let mut end = data_start;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(CheckpointError::Malformed(format!("{}: unsupported dtype {:?}", e.name, e.dtype)));
        }
        if e.offset % ALIGN as u64 != 0 {
            return Err(CheckpointError::Malformed(format!("{}: offset {} is not aligned", e.name, e.offset)));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_len != numel as u64 * 4 {
            return Err(CheckpointError::Malformed(format!(
                "{}: {} bytes for shape {:?}",
                e.name, e.byte_len, e.shape
            )));
        }
        end = end.max(data_start.saturating_add(e.offset.saturating_add(e.byte_len) as usize));
    }
    if bytes.len() < end {
        return Err(truncated(end));
    }
    if bytes.len() > end {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - end)));
    }

    let run = header.metadata.run;
    let plan = header.metadata.plan;
    plan.validate(&run.model)
        .map_err(|e| CheckpointError::AliasInconsistency(e.to_string()))?;
    // Build the expected layout from the plan, then demand exactly one stored
    // tensor per parameter, in layout order.
    let layout = ModelLayout::new(&run.model, &plan, &run.transforms.to_transform_config())?;
    let specs = &layout.specs;
    if header.tensors.len() != specs.len() {
        return Err(CheckpointError::AliasInconsistency(format!(
            "plan has {} parameter tensors, file stores {}",
            specs.len(),
            header.tensors.len()
        )));
    }
    let mut params = Vec::with_capacity(specs.len());
    for (spec, e) in specs.iter().zip(&header.tensors) {
        if spec.name != e.name {
            return Err(CheckpointError::AliasInconsistency(format!(
                "expected tensor {}, found {}",
                spec.name, e.name
            )));
        }
        if spec.shape != e.shape {
            return Err(CheckpointError::Malformed(format!(
                "{}: shape {:?}, expected {:?}",
                e.name, e.shape, spec.shape
            )));
        }
        let start = data_start + e.offset as usize;
        let data: Vec<f32> = bytes[start..start + e.byte_len as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor::new(&e.shape, data)?);
    }
    let model = VisionTransformer::from_params(&run.model, &plan, &run.transforms.to_transform_config(), params)?;
    check_description(&model, &run)?;
    Ok(Checkpoint { model, run })
}

/// Writes through a temporary file in the target directory, so a failed
/// save leaves no partial checkpoint behind.
pub fn save(model: &VisionTransformer<f32>, run: &RunConfig, path: &Path) -> Result<()> {
    let bytes = encode(model, run)?;
    write_atomically(path, &bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = crate::output::temp_path(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
