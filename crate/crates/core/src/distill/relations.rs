use crate::error::{Error, Result};
use crate::numerics::{matmul_nt, softmax_rows, Scalar, Tape, Tensor, Var};
use crate::transformer::LayerCapture;

/// Relation matrices of one layer.
///
/// `qkv[i][j] = softmax_rows(S_i S_jᵀ / √w)` with `S = (Q, K, V)` and `w` the
/// concatenated head width; `hidden = softmax_rows(H Hᵀ / √d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSet<F> {
    pub qkv: [[Tensor<F>; 3]; 3],
    pub hidden: Tensor<F>,
}

impl<F: Scalar> RelationSet<F> {
    /// Largest `|Σ_row − 1|` over all ten matrices.
    pub fn max_row_sum_error(&self) -> f64 {
        self.qkv
            .iter()
            .flatten()
            .chain(std::iter::once(&self.hidden))
            .flat_map(|m| {
                let n = m.shape()[1];
                m.data()
                    .chunks(n)
                    .map(|row| (row.iter().map(|x| x.to_f64_lossy()).sum::<f64>() - 1.0).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

fn relation<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, w) = a.matrix_dims("relation")?;
    let scale = F::from_f64_lossy(1.0 / (w as f64).sqrt());
    softmax_rows(&matmul_nt(a, b)?.scale(scale))
}

pub fn relation_matrices<F: Scalar>(layer: &LayerCapture<Tensor<F>>) -> Result<RelationSet<F>> {
    let s = [&layer.q, &layer.k, &layer.v];
    let shape = layer.q.shape();
    if shape.len() != 2 || s.iter().any(|m| m.shape() != shape) {
        return Err(Error::shape("relation_matrices", layer.q.shape(), layer.k.shape()));
    }
    if layer.hidden.rank() != 2 || layer.hidden.shape()[0] != shape[0] {
        return Err(Error::shape("relation_matrices", shape, layer.hidden.shape()));
    }
    let row = |i: usize| -> Result<[Tensor<F>; 3]> {
        Ok([relation(s[i], s[0])?, relation(s[i], s[1])?, relation(s[i], s[2])?])
    };
    Ok(RelationSet {
        qkv: [row(0)?, row(1)?, row(2)?],
        hidden: relation(&layer.hidden, &layer.hidden)?,
    })
}

/// All nine Q/K/V relations as one `9N×N` matrix.
///
/// The three `N×w` inputs are stacked into `3N×w`, multiplied by their own
/// transpose once, and the `3N×3N` result is viewed as `9N` rows of length
/// `N`; row `(i·N + n)·3 + j` is row `n` of `R_ij`.
pub(crate) fn qkv_relations_on_tape<F: Scalar>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (n, w) = match tape.shape(q) {
        &[n, w] => (n, w),
        other => return Err(Error::shape("qkv_relations", other, &[0, 0])),
    };
    let s = tape.stack(&[q, k, v])?;
    let s = tape.reshape(s, &[3 * n, w])?;
    let gram = tape.matmul_nt(s, s)?;
    let gram = tape.scale(gram, F::from_f64_lossy(1.0 / (w as f64).sqrt()))?;
    let rows = tape.reshape(gram, &[9 * n, n])?;
    tape.softmax_rows(rows)
}

pub(crate) fn hidden_relations_on_tape<F: Scalar>(tape: &mut Tape<F>, h: Var) -> Result<Var> {
    let d = match tape.shape(h) {
        &[_, d] => d,
        other => return Err(Error::shape("hidden_relations", other, &[0, 0])),
    };
    let gram = tape.matmul_nt(h, h)?;
    let gram = tape.scale(gram, F::from_f64_lossy(1.0 / (d as f64).sqrt()))?;
    tape.softmax_rows(gram)
}
