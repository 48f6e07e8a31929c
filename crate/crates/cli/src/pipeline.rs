//! The two-phase pipeline as library calls: train a teacher, compress it into
//! a shared student, distill, then measure. The commands wrap these with
//! file I/O; the acceptance experiment calls them directly.

use anyhow::{bail, Context};
use minivit::diagnostics::{layer_similarity, GradNormTrace, SimilarityCurve};
use minivit::distill::{evaluate, train_distill_with, DistillConfig, TrainEvent, TrainLog};
use minivit::multiplex::{build_compact_model, make_sharing_plan};
use minivit::numerics::Tensor;
use minivit::transformer::VisionTransformer;

use crate::config::{RunConfig, SharingConfig, TransformsConfig};
use crate::synth::train_test_split;

pub type Model = VisionTransformer<f32>;

/// Probe images for similarity analysis.
pub const PROBE_SIZE: usize = 64;

/// `cfg` restated for the unshared, untransformed teacher.
pub fn teacher_run(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        sharing: SharingConfig::default(),
        transforms: TransformsConfig {
            msa: false,
            mlp: false,
            ..cfg.transforms
        },
        ..cfg.clone()
    }
}

/// Trains the baseline model on labels only.
pub fn train_teacher(cfg: &RunConfig, observer: &mut dyn FnMut(TrainEvent<'_>)) -> anyhow::Result<(Model, TrainLog)> {
    cfg.validate()?;
    let (train, test) = train_test_split(&cfg.data)?;
    let mut model = Model::baseline(&cfg.model, cfg.optim.seed)?;
    let log = train_distill_with(
        &mut model,
        None,
        &train,
        Some(&test),
        &cfg.optim,
        &DistillConfig::ground_truth(),
        observer,
    )?;
    Ok((model, log))
}

/// Compact student seeded from `teacher` under the sharing and transform
/// sections of `cfg`.
pub fn compress(teacher: &Model, cfg: &RunConfig) -> anyhow::Result<Model> {
    cfg.validate()?;
    if teacher.config() != &cfg.model {
        bail!("the teacher checkpoint was trained for a different model configuration");
    }
    let plan = make_sharing_plan(&cfg.model, cfg.sharing.share_mode())?;
    let student = build_compact_model(
        &cfg.model,
        &plan,
        &cfg.transforms.to_transform_config(),
        Some(teacher),
        cfg.optim.seed,
    )?;
    Ok(student)
}

/// Trains `student` on the objective in `cfg.distill`.
pub fn distill(
    student: &mut Model,
    teacher: Option<&Model>,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> anyhow::Result<TrainLog> {
    cfg.validate()?;
    let (train, test) = train_test_split(&cfg.data)?;
    let log = train_distill_with(student, teacher, &train, Some(&test), &cfg.optim, &cfg.distill, observer)?;
    Ok(log)
}

/// Top-1 accuracy on the held-out split.
pub fn top1(model: &Model, cfg: &RunConfig) -> anyhow::Result<f64> {
    cfg.validate()?;
    let (_, test) = train_test_split(&cfg.data)?;
    Ok(evaluate(model, &test, cfg.optim.batch_size)?)
}

/// The first `n` held-out images, or all of them if there are fewer.
pub fn probe_batch(cfg: &RunConfig, n: usize) -> anyhow::Result<Vec<Tensor<f32>>> {
    let (_, test) = train_test_split(&cfg.data)?;
    Ok(test.window(0, n).samples()?.into_iter().map(|s| s.image).collect())
}

/// Layer-by-layer CKA of `model` against `reference` on the probe batch of
/// [`PROBE_SIZE`] held-out images.
pub fn similarity(reference: &Model, model: &Model, cfg: &RunConfig) -> anyhow::Result<SimilarityCurve> {
    let probe = probe_batch(cfg, PROBE_SIZE)?;
    layer_similarity(reference, model, &probe).context("comparing layers")
}

/// Gradient norms over the first `steps` optimizer steps of distilling
/// `student`; the student itself is left untouched.
pub fn gradnorm_probe(
    student: &Model,
    teacher: Option<&Model>,
    cfg: &RunConfig,
    steps: usize,
) -> anyhow::Result<Vec<GradNormTrace>> {
    cfg.validate()?;
    let (train, _) = train_test_split(&cfg.data)?;
    let train = train.window(0, steps * cfg.optim.batch_size);
    let mut optim = cfg.optim.clone();
    optim.epochs = 1;
    let mut model = student.clone();
    let log = train_distill_with(&mut model, teacher, &train, None, &optim, &cfg.distill, &mut |_| {})?;
    Ok(log.steps.into_iter().map(|s| s.grad_norms).collect())
}
