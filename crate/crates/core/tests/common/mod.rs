//! Brute-force reference implementations used as test oracles. Everything
//! here is plain nested loops in double precision, written without the
//! library's kernels or tape.
#![allow(dead_code, clippy::needless_range_loop)]

use minivit::numerics::Tensor;
use minivit::transformer::VisionTransformer;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    Tensor::new(&[m.len(), m[0].len()], m.iter().flatten().copied().collect()).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_mat(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

pub fn layer_norm(a: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

/// erf by its Maclaurin series (|x| < 3) or continued fraction tail.
pub fn erf(x: f64) -> f64 {
    if x.abs() >= 3.0 {
        // erfc(x) ≈ e^{-x²}/(x√π) · (1 − 1/(2x²) + 3/(4x⁴) − 15/(8x⁶))
        let t = 1.0 / (x * x);
        let erfc = (-x * x).exp() / (x.abs() * std::f64::consts::PI.sqrt())
            * (1.0 - 0.5 * t + 0.75 * t * t - 1.875 * t * t * t);
        return x.signum() * (1.0 - erfc);
    }
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-18 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Same-padded cross-correlation of an `h×w` grid (`grid[i*w+j][c]`).
pub fn depthwise(grid: &Mat, h: usize, w: usize, kernel: &Tensor<f64>) -> Mat {
    let k = kernel.shape()[0];
    let d = grid[0].len();
    let r = (k / 2) as isize;
    let mut out = vec![vec![0.0; d]; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            for a in -r..=r {
                for b in -r..=r {
                    let (y, x) = (i + a, j + b);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    for c in 0..d {
                        out[(i * w as isize + j) as usize][c] +=
                            kernel.at(&[(a + r) as usize, (b + r) as usize, c]) * grid[(y * w as isize + x) as usize][c];
                    }
                }
            }
        }
    }
    out
}

pub struct OracleLayer {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// `[head][row][col]`
    pub logits: Vec<Mat>,
    pub attn: Vec<Mat>,
    pub hidden: Mat,
    pub output: Mat,
}

fn p<'a>(m: &'a VisionTransformer<f64>, name: &str) -> &'a Tensor<f64> {
    m.param_by_name(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn vecp(m: &VisionTransformer<f64>, name: &str) -> Vec<f64> {
    p(m, name).data().to_vec()
}

/// Forward pass of one `s×s×c` image by direct loops over the named
/// parameters. Returns logits and per-layer intermediates.
pub fn oracle_forward(m: &VisionTransformer<f64>, image: &Tensor<f64>) -> (Vec<f64>, Vec<OracleLayer>) {
    let cfg = m.config();
    let (s, ps, c) = (cfg.image_size, cfg.patch_size, cfg.in_channels);
    let side0 = s / ps;
    // Patches in (row, col, channel) order.
    let mut patches = Vec::new();
    for pi in 0..side0 {
        for pj in 0..side0 {
            let mut v = Vec::new();
            for r in 0..ps {
                for q in 0..ps {
                    for ch in 0..c {
                        v.push(image.at(&[pi * ps + r, pj * ps + q, ch]));
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut x = add_row(&matmul(&patches, &to_mat(p(m, "patch_embed.weight"))), &vecp(m, "patch_embed.bias"));
    let pos = to_mat(p(m, "pos_embed"));
    for (row, prow) in x.iter_mut().zip(&pos) {
        for (a, b) in row.iter_mut().zip(prow) {
            *a += b;
        }
    }

    let mut side = side0;
    let mut layers = Vec::new();
    for (si, stage) in cfg.stages.iter().enumerate() {
        if si > 0 && stage.merge_tokens {
            let d = x[0].len();
            let half = side / 2;
            let mut merged = Vec::new();
            for i in 0..half {
                for j in 0..half {
                    let mut v = Vec::with_capacity(4 * d);
                    for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        v.extend_from_slice(&x[(2 * i + di) * side + 2 * j + dj]);
                    }
                    merged.push(v);
                }
            }
            side = half;
            x = add_row(
                &matmul(&merged, &to_mat(p(m, &format!("stage{si}.merge.weight")))),
                &vecp(m, &format!("stage{si}.merge.bias")),
            );
        }
        let heads = stage.num_heads;
        let d = stage.embed_dim;
        let dh = d / heads;
        for l in 0..stage.num_layers {
            let g = m.plan().group_of(si, l).unwrap();
            let blk = |n: &str| format!("stage{si}.block{g}.{n}");
            let lay = |n: &str| format!("stage{si}.layer{l}.{n}");
            let lin = |y: &Mat, n: &str| add_row(&matmul(y, &to_mat(p(m, &blk(&format!("{n}.weight"))))), &vecp(m, &blk(&format!("{n}.bias"))));

            let y = layer_norm(&x, &vecp(m, &lay("norm1.gain")), &vecp(m, &lay("norm1.bias")));
            let (q, k, v) = (lin(&y, "attn.q"), lin(&y, "attn.k"), lin(&y, "attn.v"));
            let n = x.len();
            let mut raw = Vec::new();
            for h in 0..heads {
                let mut lg = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        for t in 0..dh {
                            lg[i][j] += q[i][h * dh + t] * k[j][h * dh + t];
                        }
                        lg[i][j] /= (dh as f64).sqrt();
                    }
                }
                raw.push(lg);
            }
            let mix = |f: Option<&Tensor<f64>>, maps: &Vec<Mat>| -> Vec<Mat> {
                let Some(f) = f else { return maps.clone() };
                (0..heads)
                    .map(|a| {
                        let mut out = vec![vec![0.0; n]; n];
                        for b in 0..heads {
                            for i in 0..n {
                                for j in 0..n {
                                    out[i][j] += f.at(&[a, b]) * maps[b][i][j];
                                }
                            }
                        }
                        out
                    })
                    .collect()
            };
            let logits = mix(m.param_by_name(&lay("attn_mix.pre")), &raw);
            let attn: Vec<Mat> = logits.iter().map(softmax_mat).collect();
            let applied = mix(m.param_by_name(&lay("attn_mix.post")), &attn);
            let mut cat = vec![vec![0.0; d]; n];
            for h in 0..heads {
                for i in 0..n {
                    for t in 0..dh {
                        for j in 0..n {
                            cat[i][h * dh + t] += applied[h][i][j] * v[j][h * dh + t];
                        }
                    }
                }
            }
            let o = lin(&cat, "attn.proj");
            for (a, b) in x.iter_mut().zip(&o) {
                for (u, w) in a.iter_mut().zip(b) {
                    *u += w;
                }
            }
            let mut y = layer_norm(&x, &vecp(m, &lay("norm2.gain")), &vecp(m, &lay("norm2.bias")));
            if let Some(kern) = m.param_by_name(&lay("mlp_conv.kernel")) {
                y = depthwise(&y, side, side, kern);
            }
            let hid: Mat = lin(&y, "mlp.fc1").iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
            let hidden = lin(&hid, "mlp.fc2");
            for (a, b) in x.iter_mut().zip(&hidden) {
                for (u, w) in a.iter_mut().zip(b) {
                    *u += w;
                }
            }
            layers.push(OracleLayer {
                q,
                k,
                v,
                logits,
                attn,
                hidden,
                output: x.clone(),
            });
        }
    }
    let xn = layer_norm(&x, &vecp(m, "norm.gain"), &vecp(m, "norm.bias"));
    let d = xn[0].len();
    let pooled: Vec<f64> = (0..d).map(|j| xn.iter().map(|r| r[j]).sum::<f64>() / xn.len() as f64).collect();
    let logits = add_row(&matmul(&vec![pooled], &to_mat(p(m, "head.weight"))), &vecp(m, "head.bias"));
    (logits[0].clone(), layers)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Deterministic pseudo-random tensor in `[-scale, scale)`.
pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).unwrap()
}

/// Replaces every parameter with values drawn from `seed` (so that norms,
/// transforms and biases are all non-trivial).
pub fn randomize<F: minivit::numerics::Scalar>(m: &mut VisionTransformer<F>, seed: u64, scale: f64) {
    for (i, t) in m.params_mut().iter_mut().enumerate() {
        let r = rand_tensor(t.shape(), seed.wrapping_mul(1000).wrapping_add(i as u64), scale);
        *t = r.cast();
    }
}

/// `softmax_rows(a bᵀ / √w)` with `w` the column count of `a`.
pub fn relation(a: &Mat, b: &Mat) -> Mat {
    let scale = 1.0 / (a[0].len() as f64).sqrt();
    let g = matmul(a, &transpose(b));
    softmax_mat(&g.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect())
}

/// `−Σ_j t_j log(s_j + 1e-12)`.
pub fn row_ce(s: &[f64], t: &[f64]) -> f64 {
    -s.iter().zip(t).map(|(p, q)| q * (p + 1e-12).ln()).sum::<f64>()
}

/// Mean row cross-entropy between two equally shaped matrices.
pub fn mean_row_ce(s: &Mat, t: &Mat) -> f64 {
    s.iter().zip(t).map(|(a, b)| row_ce(a, b)).sum::<f64>() / s.len() as f64
}

/// Relation-loss oracle for one layer: the nine Q/K/V pairings (mean over
/// pairings and rows) and the hidden-state relation.
pub fn layer_relation_losses(s: [&Mat; 4], t: [&Mat; 4]) -> (f64, f64) {
    let mut attn = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            attn += mean_row_ce(&relation(s[i], s[j]), &relation(t[i], t[j]));
        }
    }
    let hddn = mean_row_ce(&relation(s[3], s[3]), &relation(t[3], t[3]));
    (attn / 9.0, hddn)
}
