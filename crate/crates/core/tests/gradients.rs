//! Central-difference checks of every tape operation, the transformed
//! attention and MLP blocks, and the full distillation objective.

mod common;

use common::rand_tensor;
use minivit::distill::{objective_on_tape, DistillConfig};
use minivit::multiplex::{make_sharing_plan, ShareMode, TransformConfig};
use minivit::Result;
use minivit::numerics::{finite_diff_check, GradCheckReport, Tape, Tensor, Var, DEFAULT_FD_EPS, DEFAULT_FD_TOL, LN_EPS};
use minivit::transformer::*;

fn p(name: &str, shape: &[usize], seed: u64) -> (String, Tensor<f64>) {
    (name.to_string(), rand_tensor(shape, seed, 1.0))
}

/// Reduces `out` to a scalar through fixed random weights so that every
/// output element influences the loss differently.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(tape.shape(out), seed, 1.0));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check(
    what: &str,
    params: &[(String, Tensor<f64>)],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> GradCheckReport {
    let report = finite_diff_check(f, params, DEFAULT_FD_EPS, DEFAULT_FD_TOL).unwrap();
    assert!(report.passed(), "{what}: {:#?}", report.failures());
    report
}

#[test]
fn matrix_products() {
    let params = [p("a", &[3, 4], 1), p("b", &[4, 2], 2), p("c", &[5, 4], 3)];
    check("matmul", &params, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        contract(t, y, 10)
    });
    check("matmul_nt", &params, |t, v| {
        let y = t.matmul_nt(v[0], v[2])?;
        contract(t, y, 11)
    });
    check("matmul_nt self", &params, |t, v| {
        let y = t.matmul_nt(v[2], v[2])?;
        contract(t, y, 12)
    });
}

#[test]
fn elementwise_and_bias() {
    let params = [p("a", &[3, 4], 4), p("b", &[3, 4], 5), p("bias", &[4], 6)];
    check("add", &params, |t, v| {
        let y = t.add(v[0], v[1])?;
        contract(t, y, 13)
    });
    check("mul", &params, |t, v| {
        let y = t.mul(v[0], v[1])?;
        contract(t, y, 14)
    });
    check("mul self", &params, |t, v| {
        let y = t.mul(v[0], v[0])?;
        contract(t, y, 15)
    });
    check("add_bias", &params, |t, v| {
        let y = t.add_bias(v[0], v[2])?;
        contract(t, y, 16)
    });
    check("scale", &params, |t, v| {
        let y = t.scale(v[1], -0.37)?;
        contract(t, y, 17)
    });
    check("gelu", &params, |t, v| {
        let y = t.gelu(v[0])?;
        contract(t, y, 18)
    });
}

#[test]
fn normalizations() {
    let params = [p("x", &[3, 5], 7), p("gain", &[5], 8), p("bias", &[5], 9)];
    check("softmax_rows", &params, |t, v| {
        let y = t.softmax_rows(v[0])?;
        contract(t, y, 19)
    });
    check("layer_norm", &params, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], LN_EPS)?;
        contract(t, y, 20)
    });
    check("mean_rows", &params, |t, v| {
        let y = t.mean_rows(v[0])?;
        contract(t, y, 21)
    });
    check("sum", &params, |t, v| t.sum(v[0]));
}

#[test]
fn cross_entropy_student_side() {
    let params = [p("s", &[4, 3], 22)];
    check("cross_entropy_rows", &params, |t, v| {
        let s = t.softmax_rows(v[0])?;
        let target = t.constant(rand_tensor(&[4, 3], 23, 1.0));
        let target = t.softmax_rows(target)?;
        t.cross_entropy_rows(s, target)
    });
}

#[test]
fn structural_ops() {
    let params = [p("a", &[4, 6], 24), p("b", &[4, 2], 25), p("g", &[4, 4, 3], 26)];
    check("reshape", &params, |t, v| {
        let y = t.reshape(v[0], &[6, 4])?;
        contract(t, y, 27)
    });
    check("slice_cols", &params, |t, v| {
        let y = t.slice_cols(v[0], 2, 3)?;
        contract(t, y, 28)
    });
    check("concat_cols", &params, |t, v| {
        let y = t.concat_cols(&[v[1], v[0], v[1]])?;
        contract(t, y, 29)
    });
    check("stack", &params, |t, v| {
        let y = t.stack(&[v[1], v[1], v[1]])?;
        contract(t, y, 30)
    });
    check("select", &params, |t, v| {
        let y = t.select(v[2], 2)?;
        contract(t, y, 31)
    });
    check("merge_2x2", &params, |t, v| {
        let x = t.reshape(v[2], &[16, 3])?;
        let y = t.merge_2x2(x, 4, 4)?;
        contract(t, y, 32)
    });
}

#[test]
fn depthwise_convolution() {
    let params = [p("x", &[3, 4, 2], 33), p("k", &[3, 3, 2], 34)];
    check("depthwise_conv2d", &params, |t, v| {
        let y = t.depthwise_conv2d(v[0], v[1])?;
        contract(t, y, 35)
    });
}

fn attention_params(d: usize, heads: usize, seed: u64) -> Vec<(String, Tensor<f64>)> {
    let mut params = vec![p("z", &[5, d], seed)];
    for (i, name) in ["q", "k", "v", "proj"].iter().enumerate() {
        params.push(p(&format!("{name}.weight"), &[d, d], seed + 1 + 2 * i as u64));
        params.push(p(&format!("{name}.bias"), &[d], seed + 2 + 2 * i as u64));
    }
    params.push(p("post", &[heads, heads], seed + 20));
    params.push(p("pre", &[heads, heads], seed + 21));
    params
}

fn attention_vars(v: &[Var]) -> AttentionWeights<Var> {
    AttentionWeights {
        q_weight: v[1],
        q_bias: v[2],
        k_weight: v[3],
        k_bias: v[4],
        v_weight: v[5],
        v_bias: v[6],
        proj_weight: v[7],
        proj_bias: v[8],
    }
}

/// The key bias adds a per-row constant to the logits, which the softmax
/// ignores, so its true gradient through attention alone is zero and the
/// relative-error test degenerates to comparing rounding noise. It is
/// checked against an absolute bound instead.
fn assert_key_bias_vanishes(report: &GradCheckReport) -> Vec<String> {
    let kb = report.params.iter().find(|c| c.name == "k.bias").unwrap();
    assert!(kb.analytic.abs() < 1e-12 && kb.numeric.abs() < 1e-8, "{kb:?}");
    report
        .params
        .iter()
        .filter(|c| c.name != "k.bias" && c.max_rel_err > report.tol)
        .map(|c| c.name.clone())
        .collect()
}

#[test]
fn attention_with_head_mixing() {
    let params = attention_params(6, 3, 40);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let mixing = HeadMixing {
            post: Some(v[9]),
            pre: Some(v[10]),
        };
        let (out, _) = attention(t, v[0], &attention_vars(v), 3, mixing)?;
        contract(t, out, 41)
    };
    let report = finite_diff_check(f, &params, DEFAULT_FD_EPS, DEFAULT_FD_TOL).unwrap();
    assert!(assert_key_bias_vanishes(&report).is_empty(), "{:#?}", report.failures());
}

#[test]
fn attention_without_mixing() {
    let params = attention_params(4, 2, 50);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let (out, _) = attention(t, v[0], &attention_vars(v), 2, HeadMixing::default())?;
        contract(t, out, 51)
    };
    let report = finite_diff_check(f, &params[..9], DEFAULT_FD_EPS, DEFAULT_FD_TOL).unwrap();
    assert!(assert_key_bias_vanishes(&report).is_empty(), "{:#?}", report.failures());
}

#[test]
fn mlp_with_convolution() {
    let params = [
        p("y", &[6, 3], 60),
        p("fc1.weight", &[3, 5], 61),
        p("fc1.bias", &[5], 62),
        p("fc2.weight", &[5, 3], 63),
        p("fc2.bias", &[3], 64),
        p("kernel", &[3, 3, 3], 65),
    ];
    check("mlp", &params, |t, v| {
        let w = MlpWeights {
            fc1_weight: v[1],
            fc1_bias: v[2],
            fc2_weight: v[3],
            fc2_bias: v[4],
        };
        let out = mlp(t, v[0], &w, Some((v[5], 2, 3)))?;
        contract(t, out, 66)
    });
}

fn micro_config() -> ModelConfig {
    ModelConfig::isotropic(
        8,
        4,
        2,
        3,
        StageConfig {
            num_layers: 2,
            embed_dim: 4,
            num_heads: 2,
            mlp_dim: 6,
            merge_tokens: false,
        },
    )
}

/// Gradient of the complete objective with respect to every student
/// parameter of a shared two-layer model with all transformations, against
/// an unshared teacher.
#[test]
fn full_objective_on_micro_model() {
    let cfg = micro_config();
    let mut teacher = VisionTransformer::<f64>::baseline(&cfg, 1).unwrap();
    common::randomize(&mut teacher, 2, 0.5);
    let plan = make_sharing_plan(&cfg, ShareMode::AllInStage).unwrap();
    let mut student = VisionTransformer::<f64>::init(&cfg, &plan, &TransformConfig::all(3), 3).unwrap();
    common::randomize(&mut student, 4, 0.5);

    let images: Vec<Tensor<f64>> = (0..2).map(|i| rand_tensor(&[8, 8, 2], 70 + i, 1.0)).collect();
    let labels = [0, 2];
    let loss_cfg = DistillConfig {
        temperature: 2.0,
        gt_weight: 0.5,
        ..Default::default()
    };
    let params: Vec<(String, Tensor<f64>)> = student
        .params()
        .iter()
        .enumerate()
        .map(|(i, t)| (student.param_name(i).to_string(), t.clone()))
        .collect();
    let options = ForwardOptions {
        capture: true,
        drop_path_seed: None,
    };
    let report = check("objective", &params, |tape, vars| {
        let s = student.forward_on_tape(tape, &images, Binding::Vars(vars), options)?;
        let t = teacher.forward_on_tape(tape, &images, Binding::Frozen, options)?;
        Ok(objective_on_tape(tape, &s, Some(&t), &labels, &loss_cfg)?.total)
    });
    for name in [
        "stage0.layer0.attn_mix.post",
        "stage0.layer1.attn_mix.pre",
        "stage0.layer0.mlp_conv.kernel",
        "stage0.layer1.norm1.gain",
        "stage0.block0.attn.k.bias",
    ] {
        assert!(report.params.iter().any(|c| c.name == name), "{name} not checked");
    }
}
