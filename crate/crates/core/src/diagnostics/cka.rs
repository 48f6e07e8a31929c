use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{gemm, Layout, Scalar, Tensor};
use crate::transformer::{Binding, ForwardOptions, VisionTransformer};

/// Activation compared layer by layer in [`layer_similarity`].
pub const SIMILARITY_ACTIVATION: &str = "block output (residual stream after each layer)";

/// Samples per forward pass while collecting probe activations.
const PROBE_CHUNK: usize = 16;

fn centered(x: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, Vec<f64>)> {
    let (n, p) = match *x.shape() {
        [n, p] => (n, p),
        ref other => return Err(Error::shape("cka_linear", other, &[0, 0])),
    };
    let mut data = x.to_f64_vec();
    let raw: f64 = data.iter().map(|v| v * v).sum();
    let mut mean = vec![0.0; p];
    for row in data.chunks(p) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in data.chunks_mut(p) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let centered: f64 = data.iter().map(|v| v * v).sum();
    if centered <= raw * 1e-24 {
        return Err(Error::UndefinedSimilarity(format!("{what} has no variance across samples")));
    }
    Ok((n, p, data))
}

/// `‖Aᵀ B‖_F²` for row-major `n×p` and `n×q` matrices.
fn cross_sq(n: usize, a: &[f64], p: usize, b: &[f64], q: usize) -> f64 {
    let mut out = vec![0.0; p * q];
    gemm(
        a,
        Layout::Transposed { rows: n, cols: p },
        b,
        Layout::Normal { rows: n, cols: q },
        &mut out,
        false,
    );
    out.iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two feature matrices whose rows
/// are the same samples: `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)` after centering
/// every column. Computed in double precision.
pub fn cka_linear<F: Scalar>(x: &Tensor<F>, y: &Tensor<F>) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::shape("cka_linear", x.shape(), y.shape()));
    }
    if x.shape()[0] < 2 {
        return Err(Error::UndefinedSimilarity("need at least two samples".into()));
    }
    let (n, p, xc) = centered(x, "first input")?;
    let (_, q, yc) = centered(y, "second input")?;
    let xy = cross_sq(n, &yc, q, &xc, p);
    let xx = cross_sq(n, &xc, p, &xc, p).sqrt();
    let yy = cross_sq(n, &yc, q, &yc, q).sqrt();
    Ok(xy / (xx * yy))
}

/// CKA per layer between two models on a shared probe batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityCurve {
    /// Which activation was compared.
    pub activation: &'static str,
    /// `cka[l]` compares layer `l` of both models.
    pub cka: Vec<f64>,
}

impl SimilarityCurve {
    pub fn last(&self) -> Option<f64> {
        self.cka.last().copied()
    }
}

/// Per-layer block outputs of a probe batch, each flattened to `(B·N)×d`.
fn layer_features<F: Scalar>(model: &VisionTransformer<F>, probe: &[Tensor<F>]) -> Result<Vec<Tensor<f64>>> {
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); model.num_layers()];
    let mut widths = vec![0usize; model.num_layers()];
    let options = ForwardOptions {
        capture: true,
        drop_path_seed: None,
    };
    for chunk in probe.chunks(PROBE_CHUNK) {
        let mut tape = crate::numerics::Tape::new();
        let out = model.forward_on_tape(&mut tape, chunk, Binding::Frozen, options)?;
        for set in &out.captures {
            for (l, layer) in set.layers.iter().enumerate() {
                let value = tape.value(layer.output);
                widths[l] = value.shape()[1];
                rows[l].extend(value.to_f64_vec());
            }
        }
    }
    rows.into_iter()
        .zip(widths)
        .map(|(data, w)| Tensor::new(&[data.len() / w, w], data))
        .collect()
}

/// Compares the block outputs of two equally deep models layer by layer,
/// treating every token of every probe image as one sample.
pub fn layer_similarity<F: Scalar>(
    a: &VisionTransformer<F>,
    b: &VisionTransformer<F>,
    probe: &[Tensor<F>],
) -> Result<SimilarityCurve> {
    if a.num_layers() != b.num_layers() {
        return Err(Error::Pairing(format!(
            "models have {} and {} layers",
            a.num_layers(),
            b.num_layers()
        )));
    }
    if probe.is_empty() {
        return Err(Error::Usage("empty probe batch".into()));
    }
    let fa = layer_features(a, probe)?;
    let fb = layer_features(b, probe)?;
    let cka = fa.iter().zip(&fb).map(|(x, y)| cka_linear(x, y)).collect::<Result<Vec<_>>>()?;
    Ok(SimilarityCurve {
        activation: SIMILARITY_ACTIVATION,
        cka,
    })
}
