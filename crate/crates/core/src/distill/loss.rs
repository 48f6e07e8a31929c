use serde::Serialize;

use super::config::DistillConfig;
use super::relations::{hidden_relations_on_tape, qkv_relations_on_tape};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::transformer::{Binding, CaptureSet, ForwardOptions, TapeForward, VisionTransformer};

/// Value of each term of the objective. Terms with zero weight are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossComponents {
    pub total: f64,
    pub pred: Option<f64>,
    pub attn: Option<f64>,
    pub hddn: Option<f64>,
    pub gt: Option<f64>,
}

impl LossComponents {
    /// `self += w·other`, term by term.
    pub(crate) fn add_scaled(&mut self, other: &LossComponents, w: f64) {
        fn acc(a: &mut Option<f64>, b: Option<f64>, w: f64) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + w * b);
            }
        }
        self.total += w * other.total;
        acc(&mut self.pred, other.pred, w);
        acc(&mut self.attn, other.attn, w);
        acc(&mut self.hddn, other.hddn, w);
        acc(&mut self.gt, other.gt, w);
    }
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub pred: Option<Var>,
    pub attn: Option<Var>,
    pub hddn: Option<Var>,
    pub gt: Option<Var>,
}

impl LossTerms {
    pub fn values<F: Scalar>(&self, tape: &Tape<F>) -> LossComponents {
        let v = |x: Var| tape.value(x).data()[0].to_f64_lossy();
        LossComponents {
            total: v(self.total),
            pred: self.pred.map(v),
            attn: self.attn.map(v),
            hddn: self.hddn.map(v),
            gt: self.gt.map(v),
        }
    }
}

fn as_rows<F: Scalar>(tape: &mut Tape<F>, z: Var) -> Result<Var> {
    match *tape.shape(z) {
        [c] => tape.reshape(z, &[1, c]),
        [_, _] => Ok(z),
        ref other => Err(Error::shape("logits", other, &[0, 0])),
    }
}

/// Soft-label cross-entropy between tempered softmaxes, averaged over rows.
pub fn pred_loss_on_tape<F: Scalar>(tape: &mut Tape<F>, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    let (zs, zt) = (as_rows(tape, student)?, as_rows(tape, teacher)?);
    if tape.shape(zs) != tape.shape(zt) {
        return Err(Error::shape("pred_loss", tape.shape(zs), tape.shape(zt)));
    }
    let (zs, zt) = if temperature == 1.0 {
        (zs, zt)
    } else {
        let inv = F::from_f64_lossy(1.0 / temperature);
        (tape.scale(zs, inv)?, tape.scale(zt, inv)?)
    };
    let ps = tape.softmax_rows(zs)?;
    let pt = tape.softmax_rows(zt)?;
    tape.cross_entropy_rows(ps, pt)
}

/// Cross-entropy against integer labels, averaged over rows.
pub fn label_loss_on_tape<F: Scalar>(tape: &mut Tape<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let z = as_rows(tape, logits)?;
    let (rows, classes) = (tape.shape(z)[0], tape.shape(z)[1]);
    if labels.len() != rows {
        return Err(Error::shape("label_loss", &[rows, classes], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
    }
    let onehot = Tensor::from_fn(&[rows, classes], |i| {
        if labels[i / classes] == i % classes {
            F::one()
        } else {
            F::zero()
        }
    })?;
    let target = tape.constant(onehot);
    let p = tape.softmax_rows(z)?;
    tape.cross_entropy_rows(p, target)
}

fn check_pairing<T>(student: &[CaptureSet<T>], teacher: &[CaptureSet<T>]) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::Pairing(format!(
            "student batch has {} samples, teacher batch {}",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Err(Error::Pairing("no captured samples".into()));
    }
    for (s, t) in student.iter().zip(teacher) {
        if s.layers.len() != t.layers.len() {
            return Err(Error::Pairing(format!(
                "student has {} layers, teacher {}",
                s.layers.len(),
                t.layers.len()
            )));
        }
    }
    Ok(())
}

/// Mean over samples and paired layers of a per-layer relation loss.
fn relation_loss<F: Scalar>(
    tape: &mut Tape<F>,
    student: &[CaptureSet<Var>],
    teacher: &[CaptureSet<Var>],
    mut relations: impl FnMut(&mut Tape<F>, &crate::transformer::LayerCapture<Var>) -> Result<Var>,
) -> Result<Var> {
    check_pairing(student, teacher)?;
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (s, t) in student.iter().zip(teacher) {
        for (ls, lt) in s.layers.iter().zip(&t.layers) {
            let rs = relations(tape, ls)?;
            let rt = relations(tape, lt)?;
            if tape.shape(rs) != tape.shape(rt) {
                return Err(Error::Pairing(format!(
                    "layer token counts differ: {:?} vs {:?}",
                    tape.shape(rs),
                    tape.shape(rt)
                )));
            }
            let ce = tape.cross_entropy_rows(rs, rt)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, ce)?,
                None => ce,
            });
            count += 1;
        }
    }
    let acc = acc.ok_or_else(|| Error::Pairing("models have no layers".into()))?;
    tape.scale(acc, F::from_f64_lossy(1.0 / count as f64))
}

/// Cross-entropy between the nine Q/K/V relation matrices of paired layers.
pub fn attn_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    student: &[CaptureSet<Var>],
    teacher: &[CaptureSet<Var>],
) -> Result<Var> {
    relation_loss(tape, student, teacher, |tape, l| qkv_relations_on_tape(tape, l.q, l.k, l.v))
}

/// Cross-entropy between hidden-state relation matrices of paired layers.
pub fn hddn_loss_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    student: &[CaptureSet<Var>],
    teacher: &[CaptureSet<Var>],
) -> Result<Var> {
    relation_loss(tape, student, teacher, |tape, l| hidden_relations_on_tape(tape, l.hidden))
}

/// Records the weighted objective for a batch already run through both models.
///
/// `teacher` may be `None` only when no term needs it (label-only training).
pub fn objective_on_tape<F: Scalar>(
    tape: &mut Tape<F>,
    student: &TapeForward,
    teacher: Option<&TapeForward>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let w = cfg.weights();
    let teacher = match (teacher, w.needs_teacher()) {
        (None, true) => return Err(Error::config("this objective needs a teacher")),
        (t, _) => t,
    };
    let mut terms: Vec<(f64, Var)> = Vec::new();
    let mut out = LossTerms {
        total: student.logits,
        pred: None,
        attn: None,
        hddn: None,
        gt: None,
    };
    if let (true, Some(t)) = (w.pred > 0.0, teacher) {
        let v = pred_loss_on_tape(tape, student.logits, t.logits, cfg.temperature)?;
        out.pred = Some(v);
        terms.push((w.pred, v));
    }
    if w.gt > 0.0 {
        let v = label_loss_on_tape(tape, student.logits, labels)?;
        out.gt = Some(v);
        terms.push((w.gt, v));
    }
    if let Some(t) = teacher.filter(|_| w.needs_capture()) {
        if student.captures.is_empty() || t.captures.is_empty() {
            return Err(Error::Usage("relation losses need captured activations".into()));
        }
        if w.attn > 0.0 {
            let v = attn_loss_on_tape(tape, &student.captures, &t.captures)?;
            out.attn = Some(v);
            terms.push((w.attn, v));
        }
        if w.hddn > 0.0 {
            let v = hddn_loss_on_tape(tape, &student.captures, &t.captures)?;
            out.hddn = Some(v);
            terms.push((w.hddn, v));
        }
    }
    let mut total: Option<Var> = None;
    for (weight, v) in terms {
        let v = if weight == 1.0 { v } else { tape.scale(v, F::from_f64_lossy(weight))? };
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
    }
    out.total = total.expect("prediction and label weights sum to one");
    Ok(out)
}

fn constant_captures<F: Scalar>(tape: &mut Tape<F>, sets: &[CaptureSet<Tensor<F>>]) -> Vec<CaptureSet<Var>> {
    sets.iter()
        .map(|set| CaptureSet {
            layers: set
                .layers
                .iter()
                .map(|l| crate::transformer::LayerCapture {
                    q: tape.constant(l.q.clone()),
                    k: tape.constant(l.k.clone()),
                    v: tape.constant(l.v.clone()),
                    logits: tape.constant(l.logits.clone()),
                    attn: tape.constant(l.attn.clone()),
                    hidden: tape.constant(l.hidden.clone()),
                    output: tape.constant(l.output.clone()),
                })
                .collect(),
            logits: tape.constant(set.logits.clone()),
        })
        .collect()
}

/// Prediction loss for one logit vector (`C`) or a batch (`B×C`, batch mean).
pub fn loss_pred<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>, temperature: f64) -> Result<F> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let mut tape = Tape::new();
    let (s, t) = (tape.constant(student.clone()), tape.constant(teacher.clone()));
    let loss = pred_loss_on_tape(&mut tape, s, t, temperature)?;
    tape.value(loss).item()
}

/// Q/K/V relation loss between captured batches (one capture per sample).
pub fn loss_attn<F: Scalar>(student: &[CaptureSet<Tensor<F>>], teacher: &[CaptureSet<Tensor<F>>]) -> Result<F> {
    let mut tape = Tape::new();
    let (s, t) = (constant_captures(&mut tape, student), constant_captures(&mut tape, teacher));
    let loss = attn_loss_on_tape(&mut tape, &s, &t)?;
    tape.value(loss).item()
}

/// Hidden-state relation loss between captured batches.
pub fn loss_hddn<F: Scalar>(student: &[CaptureSet<Tensor<F>>], teacher: &[CaptureSet<Tensor<F>>]) -> Result<F> {
    let mut tape = Tape::new();
    let (s, t) = (constant_captures(&mut tape, student), constant_captures(&mut tape, teacher));
    let loss = hddn_loss_on_tape(&mut tape, &s, &t)?;
    tape.value(loss).item()
}

/// Evaluates the full objective on a batch without recording gradients.
pub fn loss_total<F: Scalar>(
    student: &VisionTransformer<F>,
    teacher: &VisionTransformer<F>,
    images: &[Tensor<F>],
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<LossComponents> {
    cfg.validate()?;
    let w = cfg.weights();
    let options = ForwardOptions {
        capture: w.needs_capture(),
        drop_path_seed: None,
    };
    let mut tape = Tape::new();
    let s = student.forward_on_tape(&mut tape, images, Binding::Frozen, options)?;
    let t = if w.needs_teacher() {
        Some(teacher.forward_on_tape(&mut tape, images, Binding::Frozen, options)?)
    } else {
        None
    };
    let terms = objective_on_tape(&mut tape, &s, t.as_ref(), labels, cfg)?;
    Ok(terms.values(&tape))
}
