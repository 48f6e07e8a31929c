//! Attention, MLP and patch embedding, as tape functions plus plain tensor
//! wrappers for callers that only need values.

use super::layout::{AttentionWeights, MlpWeights};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Values recorded by one attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture<T> {
    /// `N×d`, heads concatenated.
    pub q: T,
    pub k: T,
    pub v: T,
    /// `M×N×N` softmax input (after pre-softmax head mixing, if any).
    pub logits: T,
    /// `M×N×N` softmax output (before post-softmax head mixing).
    pub attn: T,
}

/// Head-mixing matrices for one attention call.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeadMixing {
    /// Applied to attention maps after the softmax.
    pub post: Option<Var>,
    /// Applied to logits before the softmax.
    pub pre: Option<Var>,
}

pub(crate) fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_bias(y, bias)
}

/// `out[n] = Σ_m f[n, m] · maps[m]` over an `M×N×N` stack.
fn mix_heads<F: Scalar>(tape: &mut Tape<F>, f: Var, maps: Var) -> Result<Var> {
    let shape = tape.shape(maps).to_vec();
    let [m, n, n2] = shape[..] else {
        return Err(Error::shape("mix_heads", &shape, &[0, 0, 0]));
    };
    if tape.shape(f) != [m, m] {
        return Err(Error::shape("mix_heads", tape.shape(f), &[m, m]));
    }
    let flat = tape.reshape(maps, &[m, n * n2])?;
    let mixed = tape.matmul(f, flat)?;
    tape.reshape(mixed, &[m, n, n2])
}

/// Multi-head self-attention of one sample `y` (`N×d`) with optional head
/// mixing. Returns the projected output and the recorded intermediates.
pub fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    y: Var,
    w: &AttentionWeights<Var>,
    heads: usize,
    mixing: HeadMixing,
) -> Result<(Var, AttentionCapture<Var>)> {
    let (_, d) = tape.value(y).matrix_dims("attention")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} is not divisible by {heads} heads")));
    }
    let q = linear(tape, y, w.q_weight, w.q_bias)?;
    let k = linear(tape, y, w.k_weight, w.k_bias)?;
    let v = linear(tape, y, w.v_weight, w.v_bias)?;
    let (out, capture) = attention_core(tape, q, k, v, heads, mixing)?;
    let out = linear(tape, out, w.proj_weight, w.proj_bias)?;
    Ok((out, capture))
}

/// Attention from precomputed `q`, `k`, `v` (each `N×d`), before the output
/// projection.
pub(crate) fn attention_core<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mixing: HeadMixing,
) -> Result<(Var, AttentionCapture<Var>)> {
    let (_, d) = tape.value(q).matrix_dims("attention")?;
    let dh = d / heads;
    let scale = F::from_usize(dh).expect("head dim").sqrt().recip();
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        per_head.push(tape.scale(s, scale)?);
    }
    let mut logits = tape.stack(&per_head)?;
    if let Some(f2) = mixing.pre {
        logits = mix_heads(tape, f2, logits)?;
    }
    let attn = tape.softmax_rows(logits)?;
    let applied = match mixing.post {
        Some(f1) => mix_heads(tape, f1, attn)?,
        None => attn,
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let a = tape.select(applied, h)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        outs.push(tape.matmul(a, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((
        out,
        AttentionCapture {
            q,
            k,
            v,
            logits,
            attn,
        },
    ))
}

/// `σ(Y′·W1 + b1)·W2 + b2`, where `Y′` is `y` passed through the optional
/// depth-wise convolution `(kernels, grid_h, grid_w)` over the token grid.
pub fn mlp<F: Scalar>(
    tape: &mut Tape<F>,
    y: Var,
    w: &MlpWeights<Var>,
    conv: Option<(Var, usize, usize)>,
) -> Result<Var> {
    let y = match conv {
        Some((kernels, gh, gw)) => {
            let (n, d) = tape.value(y).matrix_dims("mlp")?;
            if n != gh * gw {
                return Err(Error::config(format!("{n} tokens do not form a {gh}×{gw} grid")));
            }
            let grid = tape.reshape(y, &[gh, gw, d])?;
            let mixed = tape.depthwise_conv2d(grid, kernels)?;
            tape.reshape(mixed, &[n, d])?
        }
        None => y,
    };
    let hidden = linear(tape, y, w.fc1_weight, w.fc1_bias)?;
    let hidden = tape.gelu(hidden)?;
    linear(tape, hidden, w.fc2_weight, w.fc2_bias)
}

/// Vanilla multi-head self-attention on plain tensors.
pub fn msa_forward<F: Scalar>(
    z: &Tensor<F>,
    weights: &AttentionWeights<Tensor<F>>,
    heads: usize,
) -> Result<(Tensor<F>, AttentionCapture<Tensor<F>>)> {
    attention_values(z, weights, heads, None)
}

pub(crate) fn attention_values<F: Scalar>(
    z: &Tensor<F>,
    weights: &AttentionWeights<Tensor<F>>,
    heads: usize,
    mixing: Option<(&Tensor<F>, &Tensor<F>)>,
) -> Result<(Tensor<F>, AttentionCapture<Tensor<F>>)> {
    let mut tape = Tape::new();
    let y = tape.constant(z.clone());
    let w = weights.map(|t| tape.constant(t.clone()));
    let mixing = match mixing {
        Some((post, pre)) => HeadMixing {
            post: Some(tape.constant(post.clone())),
            pre: Some(tape.constant(pre.clone())),
        },
        None => HeadMixing::default(),
    };
    let (out, cap) = attention(&mut tape, y, &w, heads, mixing)?;
    let value = |v: Var| tape.value(v).clone();
    Ok((
        value(out),
        AttentionCapture {
            q: value(cap.q),
            k: value(cap.k),
            v: value(cap.v),
            logits: value(cap.logits),
            attn: value(cap.attn),
        },
    ))
}

/// Two-layer GELU MLP on plain tensors.
pub fn mlp_forward<F: Scalar>(y: &Tensor<F>, weights: &MlpWeights<Tensor<F>>) -> Result<Tensor<F>> {
    mlp_values(y, weights, None)
}

pub(crate) fn mlp_values<F: Scalar>(
    y: &Tensor<F>,
    weights: &MlpWeights<Tensor<F>>,
    conv: Option<(&Tensor<F>, usize, usize)>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let w = weights.map(|t| tape.constant(t.clone()));
    let conv = conv.map(|(k, gh, gw)| (tape.constant(k.clone()), gh, gw));
    let out = mlp(&mut tape, yv, &w, conv)?;
    Ok(tape.value(out).clone())
}

/// Splits an `s×s×c` image into `N = (s/p)²` row-major patches, each
/// flattened in `(row, col, channel)` order: result is `N×(p²c)`.
pub fn patchify<F: Scalar>(image: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    let shape = image.shape();
    let [h, w, c] = shape[..] else {
        return Err(Error::shape("patchify", shape, &[0, 0, 0]));
    };
    if patch == 0 || h != w || h % patch != 0 {
        return Err(Error::config(format!(
            "a {h}×{w} image cannot be cut into {patch}×{patch} patches"
        )));
    }
    let side = h / patch;
    let dim = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(side * side * dim);
    for pi in 0..side {
        for pj in 0..side {
            for r in 0..patch {
                let row = pi * patch + r;
                let start = (row * w + pj * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(&[side * side, dim], out)
}

/// Patch projection plus positional embedding: `patches·W + b + pos`.
pub fn patch_embed<F: Scalar>(
    image: &Tensor<F>,
    patch: usize,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    pos: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let patches = tape.constant(patchify(image, patch)?);
    let (w, b, p) = (
        tape.constant(weight.clone()),
        tape.constant(bias.clone()),
        tape.constant(pos.clone()),
    );
    let x = linear(&mut tape, patches, w, b)?;
    let x = tape.add(x, p)?;
    Ok(tape.value(x).clone())
}
