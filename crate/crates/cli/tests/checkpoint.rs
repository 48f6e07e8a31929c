//! Checkpoint layout, round trips, aliasing and the distinct failure modes.

use minivit::multiplex::{make_sharing_plan, ShareMode};
use minivit::numerics::Tensor;
use minivit::transformer::{ModelConfig, StageConfig, VisionTransformer};
use minivit_cli::checkpoint::{decode, encode, load, save, CheckpointError, Header, ALIGN, MAGIC};
use minivit_cli::config::{RunConfig, SharingConfig, TransformsConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run_config(share: &str, transforms: bool) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::isotropic(
            8,
            4,
            1,
            3,
            StageConfig {
                num_layers: 3,
                embed_dim: 8,
                num_heads: 2,
                mlp_dim: 12,
                merge_tokens: false,
            },
        ),
        sharing: SharingConfig::parse(share).unwrap(),
        ..Default::default()
    };
    cfg.transforms = TransformsConfig {
        msa: transforms,
        mlp: transforms,
        k_conv: 3,
    };
    cfg.data.image_size = 8;
    cfg.data.classes = 3;
    cfg
}

/// A model whose every parameter, transforms included, is random.
fn model(cfg: &RunConfig, seed: u64) -> VisionTransformer<f32> {
    let plan = make_sharing_plan(&cfg.model, cfg.sharing.share_mode()).unwrap();
    let mut m = VisionTransformer::init(&cfg.model, &plan, &cfg.transforms.to_transform_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v = rng.random_range(-0.5f32..0.5);
        }
    }
    m
}

fn probe() -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..4)
        .map(|_| Tensor::from_fn(&[8, 8, 1], |_| rng.random_range(-1.0f32..1.0)).unwrap())
        .collect()
}

/// Splits a file into its parsed header and payload.
fn split(bytes: &[u8]) -> (serde_json::Value, usize, Vec<u8>) {
    let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
    let start = (12 + len).div_ceil(ALIGN) * ALIGN;
    (header, start, bytes[start..].to_vec())
}

/// Reassembles a file around a (possibly edited) header.
fn join(header: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
    let json = serde_json::to_vec(header).unwrap();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize((12 + json.len()).div_ceil(ALIGN) * ALIGN, 0);
    out.extend_from_slice(payload);
    out
}

#[test]
fn save_load_save_is_byte_identical() {
    for (share, transforms) in [("none", false), ("all", true), ("every-2", true), ("all", false)] {
        let cfg = run_config(share, transforms);
        let m = model(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mvc");
        save(&m, &cfg, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.run, cfg);
        assert_eq!(encode(&back.model, &back.run).unwrap(), first);
        for (a, b) in m.params().iter().zip(back.model.params()) {
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let (la, lb) = (m.logits(&probe()).unwrap(), back.model.logits(&probe()).unwrap());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&la), bits(&lb), "{share}");
    }
}

#[test]
fn layout_follows_the_format() {
    let cfg = run_config("all", true);
    let m = model(&cfg, 2);
    let bytes = encode(&m, &cfg).unwrap();
    assert_eq!(&bytes[..4], b"MVC1");
    let (header, start, payload) = split(&bytes);
    assert_eq!(start % ALIGN, 0);
    assert_eq!(header["format_version"], 1);
    let parsed: Header = serde_json::from_value(header.clone()).unwrap();
    assert_eq!(parsed.metadata.plan, *m.plan());
    // Every parameter once: shared block tensors are not repeated per layer.
    assert_eq!(parsed.tensors.len(), m.params().len());
    let names: std::collections::BTreeSet<&str> = parsed.tensors.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names.len(), parsed.tensors.len());
    assert!(names.contains("stage0.block0.attn.q.weight"));
    assert!(!names.contains("stage0.block1.attn.q.weight"));
    for (entry, t) in parsed.tensors.iter().zip(m.params()) {
        assert_eq!(entry.dtype, "f32");
        assert_eq!(entry.offset % ALIGN as u64, 0);
        assert_eq!(entry.byte_len, 4 * t.len() as u64);
        let at = entry.offset as usize;
        let first = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
        assert_eq!(first.to_bits(), t.data()[0].to_bits());
    }
}

#[test]
fn loaded_groups_share_one_tensor() {
    let cfg = run_config("all", true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mvc");
    save(&model(&cfg, 3), &cfg, &path).unwrap();
    let mut m = load(&path).unwrap().model;
    let id = m.layout().layers[0].block.attn.q_weight;
    let shape = m.param(id).shape().to_vec();
    *m.param_mut(id) = Tensor::full(&shape, 0.25).unwrap();
    for layer in 1..3 {
        assert!(m.attention_weights(layer).q_weight.data().iter().all(|&v| v == 0.25));
    }
    // Per-layer norms stay separate.
    let n0 = m.layout().layers[0].norm1.0;
    let n1 = m.layout().layers[1].norm1.0;
    assert_ne!(n0, n1);
}

#[test]
fn corrupt_magic_is_reported() {
    let cfg = run_config("none", false);
    let mut bytes = encode(&model(&cfg, 4), &cfg).unwrap();
    bytes[0] = b'X';
    assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic(_))));
    assert!(matches!(decode(b"MV"), Err(CheckpointError::BadMagic(_))));
}

#[test]
fn truncation_is_reported() {
    let cfg = run_config("all", true);
    let bytes = encode(&model(&cfg, 5), &cfg).unwrap();
    for cut in [bytes.len() - 1, bytes.len() - 200, 40, 8] {
        assert!(
            matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated { .. })),
            "cut at {cut}"
        );
    }
}

#[test]
fn unknown_version_is_reported() {
    let cfg = run_config("none", false);
    let bytes = encode(&model(&cfg, 6), &cfg).unwrap();
    let (mut header, _, payload) = split(&bytes);
    header["format_version"] = 2.into();
    assert!(matches!(decode(&join(&header, &payload)), Err(CheckpointError::UnsupportedVersion(2))));
    // Unchanged, the same reassembly loads.
    header["format_version"] = 1.into();
    assert!(decode(&join(&header, &payload)).is_ok());
}

#[test]
fn alias_inconsistencies_are_reported() {
    let cfg = run_config("all", false);
    let bytes = encode(&model(&cfg, 7), &cfg).unwrap();
    let (header, _, payload) = split(&bytes);
    let is_alias = |h: &serde_json::Value| matches!(decode(&join(h, &payload)), Err(CheckpointError::AliasInconsistency(_)));

    // A shared tensor stored under a second layer's name.
    let mut h = header.clone();
    let q = h["tensors"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .find(|t| t["name"] == "stage0.block0.attn.q.weight")
        .unwrap();
    q["name"] = "stage0.block1.attn.q.weight".into();
    assert!(is_alias(&h));

    // A plan that groups the layers differently from the stored tensors.
    let mut h = header.clone();
    h["metadata"]["plan"]["stages"] = serde_json::json!([[[0, 1], [2]]]);
    assert!(is_alias(&h));

    // A plan that contradicts the configured sharing mode.
    let mut h = header.clone();
    h["metadata"]["run"]["sharing"]["mode"] = "none".into();
    assert!(is_alias(&h));

    // A layer missing from the plan.
    let mut h = header;
    h["metadata"]["plan"]["stages"] = serde_json::json!([[[0, 1]]]);
    assert!(is_alias(&h));
}

#[test]
fn malformed_headers_are_reported() {
    let cfg = run_config("none", false);
    let bytes = encode(&model(&cfg, 8), &cfg).unwrap();
    let (header, _, payload) = split(&bytes);
    let mut h = header.clone();
    h["tensors"][0]["dtype"] = "f64".into();
    assert!(matches!(decode(&join(&h, &payload)), Err(CheckpointError::Malformed(_))));
    let mut h = header;
    h["tensors"][1]["offset"] = 3.into();
    assert!(matches!(decode(&join(&h, &payload)), Err(CheckpointError::Malformed(_))));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(decode(&trailing), Err(CheckpointError::Malformed(_))));
}

#[test]
fn saving_needs_a_matching_description() {
    let cfg = run_config("all", true);
    let m = model(&cfg, 9);
    let mut wrong = cfg.clone();
    wrong.sharing = SharingConfig::parse("none").unwrap();
    assert!(matches!(encode(&m, &wrong), Err(CheckpointError::AliasInconsistency(_))));
    let plan = make_sharing_plan(&cfg.model, ShareMode::AllInStage).unwrap();
    assert_eq!(m.plan(), &plan);
}

#[test]
fn failed_loads_leave_no_model_and_failed_saves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mvc");
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(matches!(load(&path), Err(CheckpointError::BadMagic(_))));
    assert!(matches!(load(&dir.path().join("absent.mvc")), Err(CheckpointError::Io(_))));

    let cfg = run_config("none", false);
    let target = dir.path().join("no_such_dir").join("m.mvc");
    assert!(save(&model(&cfg, 10), &cfg, &target).is_err());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}
