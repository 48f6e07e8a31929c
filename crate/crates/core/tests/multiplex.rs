#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use minivit::multiplex::*;
use minivit::numerics::Tensor;
use minivit::transformer::*;

fn toy_cfg(layers: usize) -> ModelConfig {
    ModelConfig::isotropic(
        8,
        4,
        1,
        3,
        StageConfig {
            num_layers: layers,
            embed_dim: 4,
            num_heads: 2,
            mlp_dim: 8,
            merge_tokens: false,
        },
    )
}

fn weights(seed: u64) -> (AttentionWeights<Tensor<f64>>, MlpWeights<Tensor<f64>>) {
    let t = |shape: &[usize], k: u64| rand_tensor(shape, seed * 100 + k, 0.9);
    (
        AttentionWeights {
            q_weight: t(&[4, 4], 0),
            q_bias: t(&[4], 1),
            k_weight: t(&[4, 4], 2),
            k_bias: t(&[4], 3),
            v_weight: t(&[4, 4], 4),
            v_bias: t(&[4], 5),
            proj_weight: t(&[4, 4], 6),
            proj_bias: t(&[4], 7),
        },
        MlpWeights {
            fc1_weight: t(&[4, 6], 8),
            fc1_bias: t(&[6], 9),
            fc2_weight: t(&[6, 4], 10),
            fc2_bias: t(&[4], 11),
        },
    )
}

#[test]
fn identity_head_mixing_is_bitwise_vanilla() {
    let (aw, _) = weights(1);
    let z = rand_tensor(&[3, 4], 2, 1.0);
    let (plain, pc) = msa_forward(&z, &aw, 2).unwrap();
    let (mixed, mc) = msa_transformed_forward(&z, &aw, &MsaTransform::identity(2).unwrap()).unwrap();
    assert_eq!(plain, mixed);
    assert_eq!(pc, mc);
}

#[test]
fn zero_pre_mixing_gives_uniform_attention() {
    let (aw, _) = weights(2);
    let t = MsaTransform {
        post: Tensor::eye(2).unwrap(),
        pre: Tensor::zeros(&[2, 2]).unwrap(),
    };
    let (_, cap) = msa_transformed_forward(&rand_tensor(&[3, 4], 3, 1.0), &aw, &t).unwrap();
    assert!(cap.attn.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn head_mixing_matches_double_sum_oracle() {
    let (aw, _) = weights(3);
    let z = rand_tensor(&[3, 4], 4, 1.0);
    let t = MsaTransform {
        post: rand_tensor(&[2, 2], 5, 1.0),
        pre: rand_tensor(&[2, 2], 6, 1.0),
    };
    let (out, _) = msa_transformed_forward(&z, &aw, &t).unwrap();

    let zm = to_mat(&z);
    let lin = |w: &Tensor<f64>, b: &Tensor<f64>| add_row(&matmul(&zm, &to_mat(w)), b.data());
    let (q, k, v) = (lin(&aw.q_weight, &aw.q_bias), lin(&aw.k_weight, &aw.k_bias), lin(&aw.v_weight, &aw.v_bias));
    let head = |m: &Mat, h: usize| -> Mat { m.iter().map(|r| r[2 * h..2 * h + 2].to_vec()).collect() };
    let raw: Vec<Mat> = (0..2)
        .map(|h| {
            matmul(&head(&q, h), &transpose(&head(&k, h)))
                .into_iter()
                .map(|r| r.into_iter().map(|x| x / 2f64.sqrt()).collect())
                .collect()
        })
        .collect();
    // A_n = softmax(Σ_m F2[n,m] ℓ_m); h_k = Σ_n F1[k,n] A_n V_k.
    let attn: Vec<Mat> = (0..2)
        .map(|n| {
            let mixed: Mat = (0..3)
                .map(|i| (0..3).map(|j| (0..2).map(|m| t.pre.at(&[n, m]) * raw[m][i][j]).sum()).collect())
                .collect();
            softmax_mat(&mixed)
        })
        .collect();
    let mut cat = vec![vec![0.0; 4]; 3];
    for kk in 0..2 {
        let vk = head(&v, kk);
        for n in 0..2 {
            let hv = matmul(&attn[n], &vk);
            for i in 0..3 {
                for c in 0..2 {
                    cat[i][2 * kk + c] += t.post.at(&[kk, n]) * hv[i][c];
                }
            }
        }
    }
    let want = add_row(&matmul(&cat, &to_mat(&aw.proj_weight)), aw.proj_bias.data());
    assert!(max_abs(out.data(), &flat(&want)) < 1e-12);
}

#[test]
fn delta_kernels_reproduce_vanilla_mlp() {
    let (_, mw) = weights(4);
    let y = rand_tensor(&[4, 4], 7, 1.0);
    let plain = mlp_forward(&y, &mw).unwrap();
    let conv = mlp_transformed_forward(&y, &mw, &MlpTransform::delta(3, 4).unwrap(), (2, 2)).unwrap();
    assert_eq!(plain, conv);
    assert!(mlp_transformed_forward(&y, &mw, &MlpTransform::delta(3, 4).unwrap(), (3, 1)).is_err());
}

#[test]
fn zero_kernels_leave_only_biases() {
    let (_, mw) = weights(5);
    let y = rand_tensor(&[4, 4], 8, 1.0);
    let t = MlpTransform {
        kernels: Tensor::zeros(&[3, 3, 4]).unwrap(),
    };
    let out = mlp_transformed_forward(&y, &mw, &t, (2, 2)).unwrap();
    let hid: Vec<f64> = mw.fc1_bias.data().iter().map(|&b| gelu(b)).collect();
    let row = add_row(&matmul(&vec![hid], &to_mat(&mw.fc2_weight)), mw.fc2_bias.data());
    for r in out.data().chunks(4) {
        assert!(max_abs(r, &row[0]) < 1e-12);
    }
}

#[test]
fn depthwise_transform_matches_dense_mixing_matrices() {
    // 2×2 grid, d = 3: materialize each channel's N×N mixing matrix C_c.
    let mw = MlpWeights {
        fc1_weight: rand_tensor(&[3, 5], 1, 1.0),
        fc1_bias: rand_tensor(&[5], 2, 0.5),
        fc2_weight: rand_tensor(&[5, 3], 3, 1.0),
        fc2_bias: rand_tensor(&[3], 4, 0.5),
    };
    let kernels = rand_tensor(&[3, 3, 3], 5, 1.0);
    let y = rand_tensor(&[4, 3], 6, 1.0);
    let out = mlp_transformed_forward(&y, &mw, &MlpTransform { kernels: kernels.clone() }, (2, 2)).unwrap();

    let ym = to_mat(&y);
    let mut y2 = vec![vec![0.0; 3]; 4];
    for c in 0..3 {
        let mut dense = vec![vec![0.0; 4]; 4];
        for i in 0..4usize {
            for j in 0..4usize {
                let (di, dj) = ((j / 2) as isize - (i / 2) as isize, (j % 2) as isize - (i % 2) as isize);
                dense[i][j] = kernels.at(&[(di + 1) as usize, (dj + 1) as usize, c]);
            }
        }
        for i in 0..4 {
            y2[i][c] = (0..4).map(|j| dense[i][j] * ym[j][c]).sum();
        }
    }
    let hid: Mat = add_row(&matmul(&y2, &to_mat(&mw.fc1_weight)), mw.fc1_bias.data())
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let want = add_row(&matmul(&hid, &to_mat(&mw.fc2_weight)), mw.fc2_bias.data());
    assert!(max_abs(out.data(), &flat(&want)) < 1e-12);
}

#[test]
fn unshared_plain_student_matches_teacher_count() {
    let cfg = toy_cfg(2);
    let teacher = VisionTransformer::<f32>::baseline(&cfg, 0).unwrap();
    let plan = make_sharing_plan(&cfg, ShareMode::EveryK(1)).unwrap();
    let student = build_compact_model(&cfg, &plan, &TransformConfig::none(), Some(&teacher), 1).unwrap();
    assert_eq!(student.count_params(), teacher.count_params());
    assert_eq!(student.params(), teacher.params());
}

#[test]
fn all_shared_toy_counts_with_transforms() {
    let cfg = toy_cfg(2);
    let plan = make_sharing_plan(&cfg, ShareMode::AllInStage).unwrap();
    for (tc, extra) in [
        (TransformConfig::none(), 0),
        (TransformConfig { msa: true, mlp: false, kernel_size: 3 }, 2 * 2 * 4),
        (TransformConfig::all(3), 2 * (2 * 4 + 9 * 4)),
    ] {
        let m = build_compact_model::<f32>(&cfg, &plan, &tc, None, 0).unwrap();
        let c = m.count_params();
        assert_eq!(c.blocks(), 188);
        assert_eq!(c.transform, extra);
        // Overhead is Σ_layers (2M² + K²d) exactly.
        let per_layer: usize = m.layout().layers.iter().map(|_| tc.params_per_layer(2, 4)).sum();
        assert_eq!(c.transform, per_layer);
    }
}

#[test]
fn transforms_start_at_identity() {
    let cfg = toy_cfg(2);
    let plan = make_sharing_plan(&cfg, ShareMode::AllInStage).unwrap();
    let m = build_compact_model::<f64>(&cfg, &plan, &TransformConfig::all(3), None, 0).unwrap();
    assert_eq!(m.param_by_name("stage0.layer1.attn_mix.post").unwrap(), &Tensor::eye(2).unwrap());
    assert_eq!(m.param_by_name("stage0.layer1.attn_mix.pre").unwrap(), &Tensor::eye(2).unwrap());
    let k = m.param_by_name("stage0.layer0.mlp_conv.kernel").unwrap();
    assert_eq!(k.sum(), 4.0);
    assert_eq!(k.at(&[1, 1, 3]), 1.0);
}

#[test]
fn identity_transforms_equal_plain_sharing() {
    let mut cfg = toy_cfg(3);
    cfg.stages.push(StageConfig {
        num_layers: 2,
        embed_dim: 6,
        num_heads: 3,
        mlp_dim: 12,
        merge_tokens: true,
    });
    cfg.image_size = 16;
    for mode in [ShareMode::EveryK(2), ShareMode::AllInStage] {
        let plan = make_sharing_plan(&cfg, mode).unwrap();
        let mut plain = VisionTransformer::<f64>::init(&cfg, &plan, &TransformConfig::none(), 0).unwrap();
        randomize(&mut plain, 3, 0.8);
        let mut mux = build_compact_model::<f64>(&cfg, &plan, &TransformConfig::all(3), None, 5).unwrap();
        for (id, spec) in plain.layout().specs.iter().enumerate() {
            mux.set_param(&spec.name, plain.param(id).clone()).unwrap();
        }
        for s in 0..4 {
            let img = rand_tensor(&[16, 16, 1], 70 + s, 1.5);
            let a = plain.logits(std::slice::from_ref(&img)).unwrap();
            let b = mux.logits(&[img]).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }
    }
}

#[test]
fn student_from_group_uniform_teacher_reproduces_logits() {
    let cfg = toy_cfg(4);
    let plan = make_sharing_plan(&cfg, ShareMode::EveryK(2)).unwrap();
    // Teacher whose layers within each group are identical.
    let mut teacher = VisionTransformer::<f32>::baseline(&cfg, 0).unwrap();
    randomize(&mut teacher, 9, 0.5);
    let layout = teacher.layout().clone();
    for group in &plan.stages[0] {
        let first = layout.layers[group[0]].block.all();
        for &l in &group[1..] {
            for (src, dst) in first.iter().zip(layout.layers[l].block.all()) {
                *teacher.param_mut(dst) = teacher.param(*src).clone();
            }
        }
    }
    let student = build_compact_model(&cfg, &plan, &TransformConfig::all(3), Some(&teacher), 1).unwrap();
    assert!(student.count_params().total() < teacher.count_params().total());
    for s in 0..4 {
        let img = rand_tensor(&[8, 8, 1], 80 + s, 1.0).cast::<f32>();
        let t = teacher.logits(std::slice::from_ref(&img)).unwrap();
        let st = student.logits(&[img]).unwrap();
        assert!(t.max_abs_diff(&st).unwrap() < 1e-5);
    }
    // Seeding copies the first layer of each group, not a later one.
    let g1_q = student.param_by_name("stage0.block1.attn.q.weight").unwrap();
    assert_eq!(g1_q, teacher.param_by_name("stage0.block2.attn.q.weight").unwrap());
}

#[test]
fn compact_model_rejects_mismatched_teacher() {
    let teacher = VisionTransformer::<f32>::baseline(&toy_cfg(2), 0).unwrap();
    let cfg = toy_cfg(4);
    let plan = make_sharing_plan(&cfg, ShareMode::AllInStage).unwrap();
    assert!(build_compact_model(&cfg, &plan, &TransformConfig::none(), Some(&teacher), 0).is_err());
    let bad_plan = make_sharing_plan(&toy_cfg(2), ShareMode::AllInStage).unwrap();
    assert!(build_compact_model::<f32>(&cfg, &bad_plan, &TransformConfig::none(), None, 0).is_err());
}

#[test]
fn param_report_ratios() {
    let cfg = toy_cfg(2);
    let r = param_report(&cfg, &make_sharing_plan(&cfg, ShareMode::AllInStage).unwrap(), &TransformConfig::none()).unwrap();
    assert_eq!(r.shared + r.unshared_norm, 188);
    assert_eq!(r.baseline_blocks, 344);
    assert!((r.block_ratio - 344.0 / 188.0).abs() < 1e-12);
    assert_eq!(r.num_groups, 1);

    let deit = ModelConfig::deit_base();
    let all = param_report(&deit, &make_sharing_plan(&deit, ShareMode::AllInStage).unwrap(), &TransformConfig::none()).unwrap();
    assert!((9.2..=10.2).contains(&all.total_ratio), "{}", all.total_ratio);
    let two = param_report(&deit, &make_sharing_plan(&deit, ShareMode::EveryK(2)).unwrap(), &TransformConfig::none()).unwrap();
    assert!((two.block_ratio - 2.0).abs() <= 0.1, "{}", two.block_ratio);
}
