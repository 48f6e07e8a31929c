//! Output files. Each command renders its outputs in memory, stages them
//! under temporary names and renames them into place only once everything
//! has been produced, so a failing command leaves nothing half-written.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use minivit::diagnostics::{GradNormTrace, SimilarityCurve};
use minivit::distill::TrainLog;
use serde::Serialize;

pub(crate) fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.partial"))
}

#[derive(Debug, Default)]
pub struct Outputs {
    staged: Vec<(PathBuf, PathBuf)>,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage(&mut self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = temp_path(path);
        self.staged.push((tmp.clone(), path.to_path_buf()));
        fs::write(&tmp, bytes)
    }

    /// Moves every staged file into place.
    pub fn commit(mut self) -> io::Result<()> {
        let staged = std::mem::take(&mut self.staged);
        for (i, (tmp, path)) in staged.iter().enumerate() {
            if let Err(e) = fs::rename(tmp, path) {
                for (tmp, _) in &staged[i..] {
                    let _ = fs::remove_file(tmp);
                }
                for (_, done) in &staged[..i] {
                    let _ = fs::remove_file(done);
                }
                return Err(e);
            }
        }
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
    }
}

/// Pretty JSON with a trailing newline; key order follows the struct.
pub fn json_bytes<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Per-step training metrics. The fixed columns come first, then one
/// gradient norm per share group, one per layer, and the label loss.
pub fn metrics_csv(log: &TrainLog) -> anyhow::Result<Vec<u8>> {
    let groups = log.group_labels.len();
    let layers = log.steps.first().map_or(0, |s| s.grad_norms.layers.len());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Vec<String> = [
        "step", "epoch", "loss_total", "loss_pred", "loss_attn", "loss_hddn", "lr", "test_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..groups).map(|i| format!("grad_norm_g{i}")));
    header.extend((0..layers).map(|i| format!("grad_norm_l{i}")));
    header.push("loss_gt".into());
    w.write_record(&header)?;
    for s in &log.steps {
        let mut row = vec![
            s.step.to_string(),
            s.epoch.to_string(),
            s.loss.total.to_string(),
            opt(s.loss.pred),
            opt(s.loss.attn),
            opt(s.loss.hddn),
            s.lr.to_string(),
            opt(s.test_acc),
        ];
        row.extend(s.grad_norms.groups.iter().map(f64::to_string));
        row.extend(s.grad_norms.layers.iter().map(f64::to_string));
        row.push(opt(s.loss.gt));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

/// `layer,cka` rows, one per layer.
pub fn similarity_csv(curve: &SimilarityCurve) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["layer", "cka"])?;
    for (l, c) in curve.cka.iter().enumerate() {
        w.write_record([l.to_string(), c.to_string()])?;
    }
    Ok(w.into_inner()?)
}

/// Gradient norms per step: share groups, then layers.
pub fn gradnorm_csv(traces: &[GradNormTrace]) -> anyhow::Result<Vec<u8>> {
    let groups = traces.first().map_or(0, |t| t.groups.len());
    let layers = traces.first().map_or(0, |t| t.layers.len());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    header.extend((0..groups).map(|i| format!("grad_norm_g{i}")));
    header.extend((0..layers).map(|i| format!("grad_norm_l{i}")));
    w.write_record(&header)?;
    for t in traces {
        let mut row = vec![t.step.to_string()];
        row.extend(t.groups.iter().map(f64::to_string));
        row.extend(t.layers.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}
