use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::blocks::{attention_core, linear, mlp, patchify, AttentionCapture, HeadMixing};
use super::config::ModelConfig;
use super::layout::{AttentionWeights, Init, LayerIds, MlpWeights, ModelLayout, ParamCount, ParamId};
use crate::error::{Error, Result};
use crate::multiplex::{delta_kernels, SharingPlan, TransformConfig};
use crate::numerics::{Scalar, Tape, Tensor, Var, LN_EPS};

/// How parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding<'a> {
    /// As named parameters; each layer marks its own use of a shared tensor.
    Trainable,
    /// As constants that never receive a gradient.
    Frozen,
    /// Caller-provided variables, one per parameter in layout order. The
    /// model's own values are ignored (used by gradient checks).
    Vars(&'a [Var]),
}

/// Per-layer activations of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture<T> {
    /// `N×d` each, heads concatenated.
    pub q: T,
    pub k: T,
    pub v: T,
    /// `M×N×N` softmax input per head.
    pub logits: T,
    /// `M×N×N` attention maps.
    pub attn: T,
    /// `N×d` MLP output.
    pub hidden: T,
    /// `N×d` block output (residual stream after the layer).
    pub output: T,
}

/// Everything recorded from one sample's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet<T> {
    pub layers: Vec<LayerCapture<T>>,
    /// Class logits, length `C`.
    pub logits: T,
}

impl CaptureSet<Var> {
    pub fn values<F: Scalar>(&self, tape: &Tape<F>) -> CaptureSet<Tensor<F>> {
        let v = |x: Var| tape.value(x).clone();
        CaptureSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerCapture {
                    q: v(l.q),
                    k: v(l.k),
                    v: v(l.v),
                    logits: v(l.logits),
                    attn: v(l.attn),
                    hidden: v(l.hidden),
                    output: v(l.output),
                })
                .collect(),
            logits: v(self.logits),
        }
    }
}

/// One parameter leaf on a tape. `layer` is set for parameters read by a
/// transformer layer, which lets shared-tensor gradients be attributed per
/// layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamUse {
    pub id: ParamId,
    pub layer: Option<usize>,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct TapeForward {
    /// `B×C` logits.
    pub logits: Var,
    /// One entry per sample when capture was requested, else empty.
    pub captures: Vec<CaptureSet<Var>>,
    /// Parameter leaves created for this pass (empty when frozen).
    pub uses: Vec<ParamUse>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub capture: bool,
    /// Seed for stochastic depth. `None` runs the deterministic eval path.
    pub drop_path_seed: Option<u64>,
}

/// Vision transformer whose block weights may be shared across layers.
///
/// Parameters live in one flat list described by a [`ModelLayout`]; layers
/// of a share group refer to the same entries, so a shared tensor exists
/// once and every layer of its group observes any change to it.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionTransformer<F> {
    config: ModelConfig,
    plan: SharingPlan,
    transforms: TransformConfig,
    layout: ModelLayout,
    params: Vec<Tensor<F>>,
}

impl<F: Scalar> VisionTransformer<F> {
    /// Randomly initialised model. Identical seeds give identical weights.
    pub fn init(cfg: &ModelConfig, plan: &SharingPlan, transforms: &TransformConfig, seed: u64) -> Result<Self> {
        let layout = ModelLayout::new(cfg, plan, transforms)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .specs
            .iter()
            .map(|spec| init_tensor(&spec.shape, spec.init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(VisionTransformer {
            config: cfg.clone(),
            plan: plan.clone(),
            transforms: *transforms,
            layout,
            params,
        })
    }

    /// Unshared, untransformed model.
    pub fn baseline(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(cfg, &SharingPlan::identity(cfg), &TransformConfig::none(), seed)
    }

    /// Model from explicit tensors in layout order.
    pub fn from_params(
        cfg: &ModelConfig,
        plan: &SharingPlan,
        transforms: &TransformConfig,
        params: Vec<Tensor<F>>,
    ) -> Result<Self> {
        let layout = ModelLayout::new(cfg, plan, transforms)?;
        if params.len() != layout.specs.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                params.len()
            )));
        }
        for (spec, t) in layout.specs.iter().zip(&params) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape("from_params", &spec.shape, t.shape()));
            }
        }
        Ok(VisionTransformer {
            config: cfg.clone(),
            plan: plan.clone(),
            transforms: *transforms,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &SharingPlan {
        &self.plan
    }

    pub fn transforms(&self) -> &TransformConfig {
        &self.transforms
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn num_layers(&self) -> usize {
        self.layout.layers.len()
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id]
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.layout.specs[id].name
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.layout.find(name).map(|id| &self.params[id])
    }

    /// Replaces the tensor called `name`; shapes must agree.
    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self
            .layout
            .find(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name}")))?;
        if value.shape() != self.params[id].shape() {
            return Err(Error::shape("set_param", self.params[id].shape(), value.shape()));
        }
        self.params[id] = value;
        Ok(())
    }

    pub fn count_params(&self) -> ParamCount {
        self.layout.count()
    }

    /// Total number of scalars in the parameter list.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> VisionTransformer<G> {
        VisionTransformer {
            config: self.config.clone(),
            plan: self.plan.clone(),
            transforms: self.transforms,
            layout: self.layout.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Attention weights seen by global layer `layer`.
    pub fn attention_weights(&self, layer: usize) -> AttentionWeights<Tensor<F>> {
        self.layout.layers[layer].block.attn.map(|&id| self.params[id].clone())
    }

    pub fn mlp_weights(&self, layer: usize) -> MlpWeights<Tensor<F>> {
        self.layout.layers[layer].block.mlp.map(|&id| self.params[id].clone())
    }

    fn bind(&self, tape: &mut Tape<F>, id: ParamId, binding: Binding<'_>, layer: Option<usize>, uses: &mut Vec<ParamUse>) -> Var {
        if let Binding::Vars(vars) = binding {
            return vars[id];
        }
        let value = self.params[id].clone();
        match binding {
            Binding::Frozen | Binding::Vars(_) => tape.constant(value),
            Binding::Trainable => {
                let var = tape.param(self.layout.specs[id].name.clone(), value);
                uses.push(ParamUse { id, layer, var });
                var
            }
        }
    }

    /// Records the forward pass of a batch of `s×s×c` images.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        images: &[Tensor<F>],
        binding: Binding<'_>,
        options: ForwardOptions,
    ) -> Result<TapeForward> {
        let cfg = &self.config;
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        if let Binding::Vars(vars) = binding {
            if vars.len() != self.params.len() {
                return Err(Error::Usage(format!(
                    "expected {} parameter variables, got {}",
                    self.params.len(),
                    vars.len()
                )));
            }
        }
        let expected = [cfg.image_size, cfg.image_size, cfg.in_channels];
        let mut patches = Vec::with_capacity(batch * cfg.num_patches() * cfg.patch_dim());
        for img in images {
            if img.shape() != expected {
                return Err(Error::shape("forward", &expected, img.shape()));
            }
            patches.extend_from_slice(patchify(img, cfg.patch_size)?.data());
        }
        let mut uses = Vec::new();
        let mut drop_rng = options
            .drop_path_seed
            .filter(|_| cfg.drop_path_rate > 0.0)
            .map(ChaCha8Rng::seed_from_u64);

        // Embedding.
        let mut tokens = cfg.num_patches();
        let patches = tape.constant(Tensor::new(&[batch * tokens, cfg.patch_dim()], patches)?);
        let e = &self.layout.embed;
        let (w, b, pos) = (
            self.bind(tape, e.weight, binding, None, &mut uses),
            self.bind(tape, e.bias, binding, None, &mut uses),
            self.bind(tape, e.pos, binding, None, &mut uses),
        );
        let mut x = linear(tape, patches, w, b)?;
        let pos = if batch == 1 {
            pos
        } else {
            let copies = tape.stack(&vec![pos; batch])?;
            tape.reshape(copies, &[batch * tokens, cfg.stages[0].embed_dim])?
        };
        x = tape.add(x, pos)?;

        let mut captures: Vec<CaptureSet<Var>> = Vec::new();
        if options.capture {
            captures = (0..batch)
                .map(|_| CaptureSet {
                    layers: Vec::with_capacity(self.num_layers()),
                    logits: x,
                })
                .collect();
        }
        let sides = cfg.grid_sides();
        let mut prev_side = sides[0];
        for (layer_index, layer) in self.layout.layers.iter().enumerate() {
            let stage = &cfg.stages[layer.stage];
            let side = sides[layer.stage];
            if layer.local == 0 {
                if let Some((mw, mb)) = self.layout.merges[layer.stage] {
                    let prev_dim = tape.shape(x)[1];
                    let per_sample = split_samples(tape, x, batch, tokens, prev_dim)?;
                    let merged = per_sample
                        .into_iter()
                        .map(|s| tape.merge_2x2(s, prev_side, prev_side))
                        .collect::<Result<Vec<_>>>()?;
                    tokens = side * side;
                    let joined = join_samples(tape, &merged, batch * tokens, 4 * prev_dim)?;
                    let (mw, mb) = (
                        self.bind(tape, mw, binding, None, &mut uses),
                        self.bind(tape, mb, binding, None, &mut uses),
                    );
                    x = linear(tape, joined, mw, mb)?;
                }
                prev_side = side;
            }
            let caps = self.layer_forward(
                tape,
                &mut x,
                layer,
                layer_index,
                LayerShape {
                    batch,
                    tokens,
                    dim: stage.embed_dim,
                    heads: stage.num_heads,
                    side,
                },
                binding,
                &mut uses,
                drop_rng.as_mut(),
                options.capture,
            )?;
            for (set, cap) in captures.iter_mut().zip(caps) {
                set.layers.push(cap);
            }
        }

        // Head: final norm, average pool, classifier.
        let d = tape.shape(x)[1];
        let h = &self.layout.head;
        let (g, nb) = (
            self.bind(tape, h.norm.0, binding, None, &mut uses),
            self.bind(tape, h.norm.1, binding, None, &mut uses),
        );
        let normed = tape.layer_norm(x, g, nb, F::from_f64_lossy(LN_EPS))?;
        let pooled = if batch == 1 {
            tape.mean_rows(normed)?
        } else {
            let per_sample = split_samples(tape, normed, batch, tokens, d)?;
            let means = per_sample
                .into_iter()
                .map(|s| tape.mean_rows(s))
                .collect::<Result<Vec<_>>>()?;
            join_samples(tape, &means, batch, d)?
        };
        let (hw, hb) = (
            self.bind(tape, h.weight, binding, None, &mut uses),
            self.bind(tape, h.bias, binding, None, &mut uses),
        );
        let logits = linear(tape, pooled, hw, hb)?;
        if options.capture {
            if batch == 1 {
                captures[0].logits = tape.reshape(logits, &[cfg.num_classes])?;
            } else {
                for (i, set) in captures.iter_mut().enumerate() {
                    set.logits = tape.select(logits, i)?;
                }
            }
        }
        Ok(TapeForward {
            logits,
            captures,
            uses,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &mut Tape<F>,
        x: &mut Var,
        layer: &LayerIds,
        layer_index: usize,
        shape: LayerShape,
        binding: Binding<'_>,
        uses: &mut Vec<ParamUse>,
        mut drop_rng: Option<&mut ChaCha8Rng>,
        capture: bool,
    ) -> Result<Vec<LayerCapture<Var>>> {
        let LayerShape {
            batch,
            tokens,
            dim,
            heads,
            side,
        } = shape;
        let at = Some(layer_index);
        let mut bind = |tape: &mut Tape<F>, id: ParamId| self.bind(tape, id, binding, at, uses);
        let eps = F::from_f64_lossy(LN_EPS);

        // Attention branch.
        let (g1, b1) = (bind(tape, layer.norm1.0), bind(tape, layer.norm1.1));
        let y = tape.layer_norm(*x, g1, b1, eps)?;
        let aw = layer.block.attn.map(|&id| bind(tape, id));
        let mixing = HeadMixing {
            post: layer.attn_mix_post.map(|id| bind(tape, id)),
            pre: layer.attn_mix_pre.map(|id| bind(tape, id)),
        };
        let q = linear(tape, y, aw.q_weight, aw.q_bias)?;
        let k = linear(tape, y, aw.k_weight, aw.k_bias)?;
        let v = linear(tape, y, aw.v_weight, aw.v_bias)?;
        let (qs, ks, vs) = (
            split_samples(tape, q, batch, tokens, dim)?,
            split_samples(tape, k, batch, tokens, dim)?,
            split_samples(tape, v, batch, tokens, dim)?,
        );
        let mut outs = Vec::with_capacity(batch);
        let mut attn_caps: Vec<AttentionCapture<Var>> = Vec::with_capacity(batch);
        for i in 0..batch {
            let (o, cap) = attention_core(tape, qs[i], ks[i], vs[i], heads, mixing)?;
            outs.push(o);
            attn_caps.push(cap);
        }
        let joined = join_samples(tape, &outs, batch * tokens, dim)?;
        let attn_out = linear(tape, joined, aw.proj_weight, aw.proj_bias)?;
        let attn_out = self.drop_path(tape, attn_out, batch, tokens, dim, drop_rng.as_deref_mut())?;
        *x = tape.add(*x, attn_out)?;

        // MLP branch.
        let (g2, b2) = (bind(tape, layer.norm2.0), bind(tape, layer.norm2.1));
        let mut y = tape.layer_norm(*x, g2, b2, eps)?;
        let mw = layer.block.mlp.map(|&id| bind(tape, id));
        if let Some(kid) = layer.mlp_conv {
            let kernels = bind(tape, kid);
            let per_sample = split_samples(tape, y, batch, tokens, dim)?;
            let mut mixed = Vec::with_capacity(batch);
            for s in per_sample {
                let grid = tape.reshape(s, &[side, side, dim])?;
                let c = tape.depthwise_conv2d(grid, kernels)?;
                mixed.push(tape.reshape(c, &[tokens, dim])?);
            }
            y = join_samples(tape, &mixed, batch * tokens, dim)?;
        }
        let hidden = mlp(tape, y, &mw, None)?;
        let branch = self.drop_path(tape, hidden, batch, tokens, dim, drop_rng)?;
        *x = tape.add(*x, branch)?;

        if !capture {
            return Ok(Vec::new());
        }
        let hiddens = split_samples(tape, hidden, batch, tokens, dim)?;
        let outputs = split_samples(tape, *x, batch, tokens, dim)?;
        Ok(attn_caps
            .into_iter()
            .zip(hiddens.into_iter().zip(outputs))
            .map(|(a, (hidden, output))| LayerCapture {
                q: a.q,
                k: a.k,
                v: a.v,
                logits: a.logits,
                attn: a.attn,
                hidden,
                output,
            })
            .collect())
    }

    /// Stochastic depth: each sample drops the residual branch with the
    /// configured rate and rescales it otherwise.
    fn drop_path(
        &self,
        tape: &mut Tape<F>,
        branch: Var,
        batch: usize,
        tokens: usize,
        dim: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let Some(rng) = rng else {
            return Ok(branch);
        };
        let p = self.config.drop_path_rate;
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let factors: Vec<F> = (0..batch)
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let mask = Tensor::from_fn(&[batch * tokens, dim], |i| factors[i / (tokens * dim)])?;
        let mask = tape.constant(mask);
        tape.mul(branch, mask)
    }

    /// Logits and per-layer activations for one image.
    pub fn forward_with_capture(&self, image: &Tensor<F>) -> Result<(Tensor<F>, CaptureSet<Tensor<F>>)> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(
            &mut tape,
            std::slice::from_ref(image),
            Binding::Frozen,
            ForwardOptions {
                capture: true,
                drop_path_seed: None,
            },
        )?;
        let set = out.captures[0].values(&tape);
        Ok((set.logits.clone(), set))
    }

    /// `B×C` logits for a batch, eval mode.
    pub fn logits(&self, images: &[Tensor<F>]) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, images, Binding::Frozen, ForwardOptions::default())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Arg-max class per image.
    pub fn predict(&self, images: &[Tensor<F>]) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    batch: usize,
    tokens: usize,
    dim: usize,
    heads: usize,
    side: usize,
}

/// `(B·N)×d` into `B` separate `N×d` values.
fn split_samples<F: Scalar>(tape: &mut Tape<F>, x: Var, batch: usize, tokens: usize, dim: usize) -> Result<Vec<Var>> {
    if batch == 1 {
        return Ok(vec![x]);
    }
    let cube = tape.reshape(x, &[batch, tokens, dim])?;
    (0..batch).map(|i| tape.select(cube, i)).collect()
}

/// Inverse of [`split_samples`]: stacks equal-shape samples into `rows×cols`.
fn join_samples<F: Scalar>(tape: &mut Tape<F>, parts: &[Var], rows: usize, cols: usize) -> Result<Var> {
    if parts.len() == 1 {
        return tape.reshape(parts[0], &[rows, cols]);
    }
    let stacked = tape.stack(parts)?;
    tape.reshape(stacked, &[rows, cols])
}

fn init_tensor<F: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Identity => Tensor::eye(shape[0]),
        Init::Delta => delta_kernels(shape[0], shape[2]),
        Init::Normal(std) => {
            let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
            Tensor::from_fn(shape, |_| loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break F::from_f64_lossy(z * f64::from(std));
                }
            })
        }
    }
}
