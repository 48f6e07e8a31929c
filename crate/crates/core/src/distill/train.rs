use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::DistillConfig;
use super::loss::{objective_on_tape, LossComponents};
use super::optim::{AdamW, CosineSchedule, OptimConfig};
use crate::diagnostics::{grad_norm_per_layer, GradNormTrace, LayerGrouping};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::transformer::{Binding, ForwardOptions, ParamId, VisionTransformer};

/// Labeled images addressed by index.
pub trait Dataset<F>: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image (`s×s×c`) and class label of sample `index`.
    fn get(&self, index: usize) -> Result<(Tensor<F>, usize)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset<F> {
    images: Vec<Tensor<F>>,
    labels: Vec<usize>,
}

impl<F: Scalar> InMemoryDataset<F> {
    pub fn new(images: Vec<Tensor<F>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(InMemoryDataset { images, labels })
    }

    pub fn images(&self) -> &[Tensor<F>] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl<F: Scalar> Dataset<F> for InMemoryDataset<F> {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn get(&self, index: usize) -> Result<(Tensor<F>, usize)> {
        match (self.images.get(index), self.labels.get(index)) {
            (Some(x), Some(&y)) => Ok((x.clone(), y)),
            _ => Err(Error::Usage(format!("sample {index} out of range"))),
        }
    }
}

/// Everything logged for one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossComponents,
    /// Set on the last step of an epoch when a test set was given.
    pub test_acc: Option<f64>,
    pub grad_norms: GradNormTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    /// Labels of the share-group norm columns.
    pub group_labels: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_acc)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.total).collect()
    }
}

/// Progress notifications from a training run.
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochSummary),
}

/// Fraction of samples classified correctly.
pub fn evaluate<F: Scalar>(model: &VisionTransformer<F>, data: &dyn Dataset<F>, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("empty evaluation set"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let correct = indices
        .par_chunks(batch_size.max(1))
        .map(|chunk| -> Result<usize> {
            let (images, labels): (Vec<_>, Vec<_>) = chunk.iter().map(|&i| data.get(i)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
            let pred = model.predict(&images)?;
            Ok(pred.iter().zip(&labels).filter(|(p, y)| p == y).count())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Where each layer's use of a parameter lands in the flat list of
/// per-layer-use gradients.
struct UseSlots {
    index: HashMap<(usize, ParamId), usize>,
    ids: Vec<ParamId>,
    grouping: LayerGrouping,
}

impl UseSlots {
    fn new<F: Scalar>(model: &VisionTransformer<F>) -> Self {
        let mut index = HashMap::new();
        let mut ids = Vec::new();
        let mut members = Vec::new();
        for (l, layer) in model.layout().layers.iter().enumerate() {
            let mut slots = Vec::new();
            for id in layer.all() {
                index.insert((l, id), ids.len());
                slots.push(ids.len());
                ids.push(id);
            }
            members.push(slots);
        }
        let labels = (0..members.len()).map(|l| format!("l{l}")).collect();
        UseSlots {
            index,
            ids,
            grouping: LayerGrouping { labels, members },
        }
    }
}

struct MicroResult<F> {
    loss: LossComponents,
    params: Vec<Option<Tensor<F>>>,
    uses: Vec<Option<Tensor<F>>>,
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, g: &Tensor<F>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(g),
        None => {
            *slot = Some(g.clone());
            Ok(())
        }
    }
}

fn mix_seed(seed: u64, step: usize, chunk: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (chunk as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z ^= z >> 31;
    z.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

struct StepContext<'a, F> {
    student: &'a VisionTransformer<F>,
    teacher: Option<&'a VisionTransformer<F>>,
    cfg: &'a DistillConfig,
    slots: &'a UseSlots,
    seed: u64,
    step: usize,
    batch_len: usize,
}

impl<F: Scalar> StepContext<'_, F> {
    fn run(&self, chunk_index: usize, chunk: &[(Tensor<F>, usize)]) -> Result<MicroResult<F>> {
        let w = self.cfg.weights();
        let images: Vec<Tensor<F>> = chunk.iter().map(|(x, _)| x.clone()).collect();
        let labels: Vec<usize> = chunk.iter().map(|&(_, y)| y).collect();
        let mut tape = Tape::new();
        let student = self.student.forward_on_tape(
            &mut tape,
            &images,
            Binding::Trainable,
            ForwardOptions {
                capture: w.needs_capture(),
                drop_path_seed: Some(mix_seed(self.seed, self.step, chunk_index)),
            },
        )?;
        let teacher = match self.teacher.filter(|_| w.needs_teacher()) {
            Some(t) => Some(t.forward_on_tape(
                &mut tape,
                &images,
                Binding::Frozen,
                ForwardOptions {
                    capture: w.needs_capture(),
                    drop_path_seed: None,
                },
            )?),
            None => None,
        };
        let terms = objective_on_tape(&mut tape, &student, teacher.as_ref(), &labels, self.cfg)?;
        let weight = chunk.len() as f64 / self.batch_len as f64;
        let scaled = tape.scale(terms.total, F::from_f64_lossy(weight))?;
        let grads = tape.backward(scaled)?;

        let mut params = vec![None; self.student.params().len()];
        let mut uses = vec![None; self.slots.ids.len()];
        for u in &student.uses {
            let g = grads.of(u.var).ok_or_else(|| Error::Usage("parameter without gradient".into()))?;
            accumulate(&mut params[u.id], g)?;
            if let Some(l) = u.layer {
                accumulate(&mut uses[self.slots.index[&(l, u.id)]], g)?;
            }
        }
        Ok(MicroResult {
            loss: terms.values(&tape),
            params,
            uses,
        })
    }
}

fn densify<F: Scalar>(slots: Vec<Option<Tensor<F>>>, shape_of: impl Fn(usize) -> Vec<usize>) -> Result<Vec<Tensor<F>>> {
    slots
        .into_iter()
        .enumerate()
        .map(|(i, g)| match g {
            Some(g) => Ok(g),
            None => Tensor::zeros(&shape_of(i)),
        })
        .collect()
}

/// Label-only training (the teacher phase).
pub fn train_supervised<F: Scalar>(
    model: &mut VisionTransformer<F>,
    train: &dyn Dataset<F>,
    test: Option<&dyn Dataset<F>>,
    optim: &OptimConfig,
) -> Result<TrainLog> {
    train_distill(model, None, train, test, optim, &DistillConfig::ground_truth())
}

/// Minibatch AdamW on the distillation objective with a cosine schedule.
///
/// The teacher only runs forward. Batches are drawn from a seeded
/// per-epoch shuffle and split into fixed micro-batches whose gradients are
/// summed in order, so a run is reproducible for a given seed.
pub fn train_distill<F: Scalar>(
    student: &mut VisionTransformer<F>,
    teacher: Option<&VisionTransformer<F>>,
    train: &dyn Dataset<F>,
    test: Option<&dyn Dataset<F>>,
    optim: &OptimConfig,
    cfg: &DistillConfig,
) -> Result<TrainLog> {
    train_distill_with(student, teacher, train, test, optim, cfg, &mut |_| {})
}

/// [`train_distill`] with a callback for every step and epoch.
pub fn train_distill_with<F: Scalar>(
    student: &mut VisionTransformer<F>,
    teacher: Option<&VisionTransformer<F>>,
    train: &dyn Dataset<F>,
    test: Option<&dyn Dataset<F>>,
    optim: &OptimConfig,
    cfg: &DistillConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainLog> {
    optim.validate()?;
    cfg.validate()?;
    let weights = cfg.weights();
    if weights.needs_teacher() {
        let t = teacher.ok_or_else(|| Error::config("distillation needs a teacher model"))?;
        if t.config().num_classes != student.config().num_classes {
            return Err(Error::config("teacher and student predict different numbers of classes"));
        }
        if weights.needs_capture() && t.num_layers() != student.num_layers() {
            return Err(Error::Pairing(format!(
                "student has {} layers, teacher {}",
                student.num_layers(),
                t.num_layers()
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }

    let groups = LayerGrouping::share_groups(student.layout());
    let slots = UseSlots::new(student);
    let decay: Vec<bool> = student.layout().specs.iter().map(|s| s.decay).collect();
    let steps_per_epoch = train.len().div_ceil(optim.batch_size);
    let schedule = CosineSchedule::new(optim, optim.epochs * steps_per_epoch);
    let mut adam = AdamW::new(optim, student.params());
    let mut log = TrainLog {
        group_labels: groups.labels.clone(),
        ..Default::default()
    };

    let mut step = 0;
    for epoch in 0..optim.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let first_step = log.steps.len();
        for batch in order.chunks(optim.batch_size) {
            let samples = batch.iter().map(|&i| train.get(i)).collect::<Result<Vec<_>>>()?;
            let ctx = StepContext {
                student,
                teacher,
                cfg,
                slots: &slots,
                seed: optim.seed,
                step,
                batch_len: samples.len(),
            };
            let parts: Vec<MicroResult<F>> = samples
                .par_chunks(optim.micro_batch)
                .enumerate()
                .map(|(k, chunk)| ctx.run(k, chunk))
                .collect::<Vec<_>>()
                .into_iter()
                .map(|r| match r {
                    Err(Error::NonFinite { .. }) => Err(Error::Diverged { step, loss: f64::NAN }),
                    other => other,
                })
                .collect::<Result<_>>()?;

            let mut loss = LossComponents::default();
            let mut params: Vec<Option<Tensor<F>>> = vec![None; student.params().len()];
            let mut uses: Vec<Option<Tensor<F>>> = vec![None; slots.ids.len()];
            for part in &parts {
                for (acc, g) in params.iter_mut().zip(&part.params) {
                    if let Some(g) = g {
                        accumulate(acc, g)?;
                    }
                }
                for (acc, g) in uses.iter_mut().zip(&part.uses) {
                    if let Some(g) = g {
                        accumulate(acc, g)?;
                    }
                }
            }
            for (part, chunk) in parts.iter().zip(samples.chunks(optim.micro_batch)) {
                loss.add_scaled(&part.loss, chunk.len() as f64 / samples.len() as f64);
            }
            if !loss.total.is_finite() {
                return Err(Error::Diverged { step, loss: loss.total });
            }

            let layout = student.layout();
            let params = densify(params, |i| layout.specs[i].shape.clone())?;
            let uses = densify(uses, |i| layout.specs[slots.ids[i]].shape.clone())?;
            let grad_norms = GradNormTrace {
                step,
                groups: grad_norm_per_layer(&params, &groups),
                layers: grad_norm_per_layer(&uses, &slots.grouping),
            };
            let lr = schedule.lr_at(step);
            adam.step(student.params_mut(), &params, &decay, lr)?;

            loss_sum += loss.total;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                test_acc: None,
                grad_norms,
            });
            observer(TrainEvent::Step(log.steps.last().expect("just pushed")));
            step += 1;
        }

        let test_acc = match test {
            Some(data) => Some(evaluate(student, data, optim.batch_size)?),
            None => None,
        };
        let count = log.steps.len() - first_step;
        if let Some(last) = log.steps.last_mut() {
            last.test_acc = test_acc;
        }
        log.epochs.push(EpochSummary {
            epoch,
            steps: count,
            mean_loss: loss_sum / count as f64,
            test_acc,
        });
        observer(TrainEvent::Epoch(log.epochs.last().expect("just pushed")));
    }
    Ok(log)
}
