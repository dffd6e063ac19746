//! Perceptron encoder and projector, SSL pretraining over pair batches,
//! SGD with momentum and the BYOL momentum target.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::ndgrad::{GradError, Graph, Tensor, Var};
use crate::sampler::{build_batch, BatchRng, PairBatch, SamplerConfig, SamplerError, SamplingMode};
use crate::scalar::Scalar;
use crate::slidegen::VirtualSlide;
use crate::ssl::{
    barlow_twins_loss, byol_pair_loss, combined_loss, vicreg_loss, CombinedLossConfig, SslError, SslMethod,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("non-finite loss {value} at step {step} ({method})")]
    NonFiniteLoss { step: usize, method: SslMethod, value: f64 },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Layer widths after the flattened-patch input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderWidths {
    pub hidden: [usize; 2],
    pub embedding: usize,
    pub projector_hidden: usize,
    pub projection: usize,
}

impl Default for EncoderWidths {
    fn default() -> Self {
        Self { hidden: [64, 64], embedding: 32, projector_hidden: 32, projection: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        // He-uniform: std = sqrt(2 / fan_in)
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape matches"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, GradError> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }

    pub fn register(&self, g: &mut Graph<T>) -> LinearVars {
        LinearVars { weight: g.param(self.weight.clone()), bias: g.param(self.bias.clone()) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, GradError> {
        let xw = g.matmul(x, self.weight)?;
        g.add_bias(xw, self.bias)
    }
}

/// Backbone (three layers, ReLU after the first two) and projector (two
/// layers, ReLU between).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    pub backbone: Vec<Linear<T>>,
    pub projector: Vec<Linear<T>>,
}

/// Pre-projector embedding and projector output for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded<T> {
    pub embedding: Tensor<T>,
    pub projection: Tensor<T>,
}

fn relu_t<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

impl<T: Scalar> EncoderParams<T> {
    pub fn input_dim(&self) -> usize {
        self.backbone[0].weight.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone[2].bias.numel()
    }

    pub fn projection_dim(&self) -> usize {
        self.projector[1].bias.numel()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear<T>> {
        self.backbone.iter().chain(&self.projector)
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.backbone
            .iter_mut()
            .chain(self.projector.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// SHA-256 of every parameter's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        crate::slidegen::hex(&h.finalize())
    }

    pub fn embed(&self, images: &Tensor<T>) -> Result<Tensor<T>, GradError> {
        let h1 = relu_t(self.backbone[0].forward(images)?);
        let h2 = relu_t(self.backbone[1].forward(&h1)?);
        self.backbone[2].forward(&h2)
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<Encoded<T>, GradError> {
        let embedding = self.embed(images)?;
        let p = relu_t(self.projector[0].forward(&embedding)?);
        let projection = self.projector[1].forward(&p)?;
        Ok(Encoded { embedding, projection })
    }

    pub fn register(&self, g: &mut Graph<T>) -> EncoderVars {
        EncoderVars {
            backbone: self.backbone.iter().map(|l| l.register(g)).collect(),
            projector: self.projector.iter().map(|l| l.register(g)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub backbone: Vec<LinearVars>,
    pub projector: Vec<LinearVars>,
}

impl EncoderVars {
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, GradError> {
        let h = self.backbone[0].forward(g, x)?;
        let h = g.relu(h);
        let h = self.backbone[1].forward(g, h)?;
        let h = g.relu(h);
        self.backbone[2].forward(g, h)
    }

    /// `(embedding, projection)`
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var), GradError> {
        let e = self.embed(g, x)?;
        let p = self.projector[0].forward(g, e)?;
        let p = g.relu(p);
        Ok((e, self.projector[1].forward(g, p)?))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.backbone.iter().chain(&self.projector).flat_map(|l| [l.weight, l.bias]).collect()
    }
}

pub fn init_params<T: Scalar>(seed: u64, input: usize, widths: &EncoderWidths) -> EncoderParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h1, h2] = widths.hidden;
    EncoderParams {
        backbone: vec![
            Linear::init(input, h1, &mut rng),
            Linear::init(h1, h2, &mut rng),
            Linear::init(h2, widths.embedding, &mut rng),
        ],
        projector: vec![
            Linear::init(widths.embedding, widths.projector_hidden, &mut rng),
            Linear::init(widths.projector_hidden, widths.projection, &mut rng),
        ],
    }
}

/// Online network plus, for BYOL, the predictor and the EMA target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslModel<T> {
    pub online: EncoderParams<T>,
    pub predictor: Option<Linear<T>>,
    pub target: Option<EncoderParams<T>>,
}

impl<T: Scalar> SslModel<T> {
    pub fn new(method: SslMethod, seed: u64, input: usize, widths: &EncoderWidths) -> Self {
        let online = init_params(seed, input, widths);
        if method != SslMethod::Byol {
            return Self { online, predictor: None, target: None };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB701);
        let predictor = Linear::init(widths.projection, widths.projection, &mut rng);
        Self { target: Some(online.clone()), online, predictor: Some(predictor) }
    }

    /// Parameters updated by SGD: online network, then predictor.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.online.tensors_mut();
        if let Some(p) = self.predictor.as_mut() {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = self.online.tensors();
        if let Some(p) = self.predictor.as_ref() {
            out.push(&p.weight);
            out.push(&p.bias);
        }
        out
    }
}

/// `velocity ← momentum·velocity + grad; param ← param − lr·velocity`
pub fn sgd_step<T: Scalar>(
    params: Vec<&mut Tensor<T>>,
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: T,
    momentum: T,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::Config(format!(
            "sgd_step got {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        p.same_shape(g, "sgd_step")?;
        p.same_shape(v, "sgd_step")?;
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `limit`.
pub fn clip_grad_norm<T: Scalar>(grads: Vec<Tensor<T>>, limit: f64) -> Vec<Tensor<T>> {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm <= limit {
        return grads;
    }
    let k = T::of(limit / norm);
    grads.into_iter().map(|g| g.map(|v| v * k)).collect()
}

/// `target ← τ·target + (1 − τ)·online`
pub fn ema_update<T: Scalar>(target: &mut EncoderParams<T>, online: &EncoderParams<T>, tau: T) -> Result<(), TrainError> {
    let src = online.tensors();
    let dst = target.tensors_mut();
    if src.len() != dst.len() {
        return Err(TrainError::Config("EMA target and online network differ in depth".into()));
    }
    let keep = T::one() - tau;
    for (t, o) in dst.into_iter().zip(src) {
        t.same_shape(o, "ema_update")?;
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = tau * *tv + keep * ov;
        }
    }
    Ok(())
}

/// Flattened `[0, 1]` images to an `N × len` matrix, shifted to be centred
/// on zero.
pub fn images_to_tensor<T: Scalar>(pixels: &[f32], len: usize) -> Result<Tensor<T>, GradError> {
    if len == 0 || pixels.len() % len != 0 || pixels.is_empty() {
        return Err(GradError::InvalidArgument(format!("{} values do not split into rows of {len}", pixels.len())));
    }
    let data = pixels.iter().map(|&v| T::of(f64::from(v) - 0.5)).collect();
    Tensor::new(vec![pixels.len() / len, len], data)
}

pub const VICREG_LR: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Global gradient-norm clip applied before each SGD step.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub widths: EncoderWidths,
    pub loss: CombinedLossConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            steps_per_epoch: 8,
            max_grad_norm: Some(5.0),
            seed: 0,
            widths: EncoderWidths::default(),
            loss: CombinedLossConfig::default(),
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for `method`. VICReg's quartic covariance term diverges at
    /// lr 0.05 under plain SGD, so it gets a smaller step.
    pub fn for_method(method: SslMethod) -> Self {
        let mut config = Self::default();
        config.loss.method = method;
        if method == SslMethod::Vicreg {
            config.lr = VICREG_LR;
        }
        config
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(TrainError::Config("epochs and steps_per_epoch must be at least 1".into()));
        }
        self.loss.validate()?;
        self.sampler.validate()?;
        self.augment.validate().map_err(SamplerError::from)?;
        if self.loss.alpha > 0.0 && self.sampler.mode == SamplingMode::Standard {
            return Err(TrainError::Config("alpha > 0 requires contextual sampling".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub context: usize,
    pub standard: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

/// A single step's graph: the loss node and the trainable leaves in
/// [`SslModel::trainable`] order.
pub struct StepGraph<T> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub params: Vec<Var>,
}

struct ViewVars {
    projection: Var,
    prediction: Option<Var>,
    target: Option<Var>,
}

fn encode_view<T: Scalar>(
    g: &mut Graph<T>,
    model: &SslModel<T>,
    online: &EncoderVars,
    predictor: Option<LinearVars>,
    images: &Tensor<T>,
) -> Result<ViewVars, GradError> {
    let x = g.constant(images.clone());
    let (_, projection) = online.encode(g, x)?;
    let prediction = predictor.map(|p| p.forward(g, projection)).transpose()?;
    let target = match &model.target {
        Some(t) => Some(g.constant(t.encode(images)?.projection)),
        None => None,
    };
    Ok(ViewVars { projection, prediction, target })
}

fn pair_loss<T: Scalar>(g: &mut Graph<T>, cfg: &CombinedLossConfig, a: &ViewVars, b: &ViewVars) -> Result<Var, GradError> {
    match cfg.method {
        SslMethod::BarlowTwins => barlow_twins_loss(g, a.projection, b.projection, T::of(cfg.bt_lambda)),
        SslMethod::Vicreg => vicreg_loss(g, a.projection, b.projection, &cfg.vicreg),
        SslMethod::Byol => {
            let missing = || GradError::InvalidArgument("BYOL needs a predictor and a target".into());
            let (qa, ta) = (a.prediction.ok_or_else(missing)?, a.target.ok_or_else(missing)?);
            let (qb, tb) = (b.prediction.ok_or_else(missing)?, b.target.ok_or_else(missing)?);
            let ab = byol_pair_loss(g, qa, tb)?;
            let ba = byol_pair_loss(g, qb, ta)?;
            let sum = g.add(ab, ba)?;
            Ok(g.scale(sum, T::of(0.5)))
        }
    }
}

/// Builds the loss graph of one step. `view_a` is encoded once and shared
/// by both terms; each term's other view is encoded only when its weight
/// is non-zero.
pub fn build_step_graph<T: Scalar>(
    model: &SslModel<T>,
    batch: &PairBatch,
    loss: &CombinedLossConfig,
    counts: &mut BranchCounts,
) -> Result<StepGraph<T>, TrainError> {
    let len = batch.dims.len();
    let mut g = Graph::new();
    let online = model.online.register(&mut g);
    let predictor = model.predictor.as_ref().map(|p| p.register(&mut g));
    let mut params = online.vars();
    if let Some(p) = predictor {
        params.extend([p.weight, p.bias]);
    }
    let xa = images_to_tensor::<T>(&batch.view_a, len)?;
    let va = encode_view(&mut g, model, &online, predictor, &xa)?;

    let ctx_images = batch.view_ctx.as_deref();
    let (ctx_calls, std_calls) = (Cell::new(0), Cell::new(0));
    let out = combined_loss(
        &mut g,
        loss.alpha,
        |g| {
            ctx_calls.set(ctx_calls.get() + 1);
            let images = ctx_images.ok_or_else(|| SslError::Config("contextual term needs a context view".into()))?;
            let xk = images_to_tensor::<T>(images, len)?;
            let vk = encode_view(g, model, &online, predictor, &xk)?;
            Ok(pair_loss(g, loss, &va, &vk)?)
        },
        |g| {
            std_calls.set(std_calls.get() + 1);
            let xb = images_to_tensor::<T>(&batch.view_b, len)?;
            let vb = encode_view(g, model, &online, predictor, &xb)?;
            Ok(pair_loss(g, loss, &va, &vb)?)
        },
    )?;
    counts.context += ctx_calls.get();
    counts.standard += std_calls.get();
    Ok(StepGraph { graph: g, loss: out, params })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutput<T> {
    pub model: SslModel<T>,
    pub trace: Vec<EpochLoss>,
    pub branch_counts: BranchCounts,
}

/// Runs `epochs × steps_per_epoch` SGD steps on batches drawn from `slides`.
pub fn pretrain<T: Scalar>(slides: &[VirtualSlide], config: &TrainConfig) -> Result<PretrainOutput<T>, TrainError> {
    config.validate()?;
    let first = slides.first().ok_or_else(|| TrainError::Config("no training slides".into()))?;
    let input = first.dims.len();
    let method = config.loss.method;
    let mut model = SslModel::<T>::new(method, config.seed, input, &config.widths);
    let mut velocity: Vec<Tensor<T>> = model.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut rng = BatchRng::seed_from(config.seed.wrapping_add(1));
    let mut counts = BranchCounts::default();
    let mut trace = Vec::with_capacity(config.epochs);
    let (lr, momentum, tau) = (T::of(config.lr), T::of(config.momentum), T::of(config.loss.byol_tau));

    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch = build_batch(slides, &config.sampler, &config.augment, &mut rng)?;
            let StepGraph { mut graph, loss, params } = build_step_graph(&model, &batch, &config.loss, &mut counts)?;
            let value = graph.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, method, value });
            }
            graph.backward(loss)?;
            let grads: Vec<Tensor<T>> = params
                .iter()
                .map(|&v| graph.grad(v).cloned().expect("trainable leaf has a gradient"))
                .collect();
            let grads = match config.max_grad_norm {
                Some(limit) => clip_grad_norm(grads, limit),
                None => grads,
            };
            sgd_step(model.trainable_mut(), &grads, &mut velocity, lr, momentum)?;
            if let Some(target) = model.target.as_mut() {
                ema_update(target, &model.online, tau)?;
            }
            total += value;
            step += 1;
        }
        trace.push(EpochLoss { epoch, loss: total / config.steps_per_epoch as f64 });
    }
    Ok(PretrainOutput { model, trace, branch_counts: counts })
}

/// Checks the step gradient of every trainable parameter along a random
/// unit direction: compares `⟨∇L, v⟩` with `(L(θ + hv) − L(θ − hv)) / 2h`
/// and returns their [`relative_error`](crate::ndgrad::relative_error).
pub fn directional_grad_error<T: Scalar>(
    model: &SslModel<T>,
    batch: &PairBatch,
    loss: &CombinedLossConfig,
    direction_seed: u64,
    step: f64,
) -> Result<f64, TrainError> {
    let mut counts = BranchCounts::default();
    let StepGraph { mut graph, loss: out, params } = build_step_graph(model, batch, loss, &mut counts)?;
    graph.backward(out)?;
    let grads: Vec<Tensor<T>> = params.iter().map(|&v| graph.grad(v).cloned().expect("param")).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(direction_seed);
    let mut direction: Vec<Vec<f64>> =
        grads.iter().map(|g| (0..g.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let norm = direction.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    direction.iter_mut().flatten().for_each(|v| *v /= norm);
    let analytic: f64 = grads
        .iter()
        .zip(&direction)
        .map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| a.as_f64() * b).sum::<f64>())
        .sum();

    let shifted = |sign: f64| -> Result<f64, TrainError> {
        let mut m = model.clone();
        for (t, d) in m.trainable_mut().into_iter().zip(&direction) {
            for (v, &dv) in t.data_mut().iter_mut().zip(d) {
                *v = T::of(v.as_f64() + sign * step * dv);
            }
        }
        let sg = build_step_graph(&m, batch, loss, &mut BranchCounts::default())?;
        Ok(sg.graph.value(sg.loss).item().as_f64())
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);
    Ok(crate::ndgrad::relative_error(analytic, numeric))
}
