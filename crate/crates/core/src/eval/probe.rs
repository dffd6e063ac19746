use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, argmax, macro_auroc, EvalError, Metrics, Standardizer};
use crate::ndgrad::{Graph, Tensor};
use crate::scalar::Scalar;
use crate::slidegen::{Dataset, PatchDims, TissueClass, VirtualSlide};
use crate::train::{images_to_tensor, init_params, sgd_step, EncoderParams, EncoderWidths, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { train_per_class: 500, val_per_class: 250, test_per_class: 250, epochs: 300, lr: 0.1, momentum: 0.9 }
    }
}

/// Patches gathered from slides with their cell labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatches {
    pub dims: PatchDims,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledPatches {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `per_class` labelled cells per tissue class. Sampling is without
/// replacement unless a class has fewer cells than requested.
pub fn sample_labeled<R: Rng + ?Sized>(
    slides: &[VirtualSlide],
    per_class: usize,
    rng: &mut R,
) -> Result<LabeledPatches, EvalError> {
    let dims = slides.first().ok_or(EvalError::ClassAbsent(0))?.dims;
    let mut pools: Vec<Vec<(usize, usize)>> = vec![Vec::new(); TissueClass::COUNT];
    for (si, s) in slides.iter().enumerate() {
        for (cell, label) in s.labels.iter().enumerate() {
            pools[label.index()].push((si, cell));
        }
    }
    let mut out = LabeledPatches { dims, pixels: Vec::new(), labels: Vec::new() };
    for (class, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(EvalError::ClassAbsent(class));
        }
        let picks: Vec<usize> = if pool.len() >= per_class {
            index::sample(rng, pool.len(), per_class).into_vec()
        } else {
            (0..per_class).map(|_| rng.random_range(0..pool.len())).collect()
        };
        for i in picks {
            let (si, cell) = pool[i];
            out.pixels.extend_from_slice(slides[si].patch_at(cell));
            out.labels.push(class);
        }
    }
    Ok(out)
}

/// Pre-projector embeddings of `patches` under a frozen encoder.
pub fn embed_patches<T: Scalar>(encoder: &EncoderParams<T>, patches: &LabeledPatches) -> Result<Tensor<T>, EvalError> {
    embed_pixels(encoder, &patches.pixels, patches.dims.len())
}

pub(crate) fn embed_pixels<T: Scalar>(encoder: &EncoderParams<T>, pixels: &[f32], len: usize) -> Result<Tensor<T>, EvalError> {
    const CHUNK: usize = 512;
    let mut data = Vec::new();
    let mut rows = 0;
    for chunk in pixels.chunks(CHUNK * len) {
        let x = images_to_tensor::<T>(chunk, len)?;
        let e = encoder.embed(&x)?;
        rows += e.shape()[0];
        data.extend_from_slice(e.data());
    }
    let d = encoder.embedding_dim();
    Ok(Tensor::new(vec![rows, d], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams<T> {
    pub standardizer: Standardizer<T>,
    pub linear: Linear<T>,
}

impl<T: Scalar> ProbeParams<T> {
    /// Row-wise class probabilities, flattened.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<f64>, EvalError> {
        let logits = self.linear.forward(&self.standardizer.apply(x))?;
        Ok(softmax_rows_f64(&logits))
    }
}

pub(crate) fn softmax_rows_f64<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(c) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

pub(crate) fn score(probs: &[f64], labels: &[usize], num_classes: usize) -> Result<Metrics, EvalError> {
    let preds: Vec<usize> = probs.chunks(num_classes).map(argmax).collect();
    Ok(Metrics { accuracy: accuracy(&preds, labels)?, auroc: macro_auroc(probs, labels, num_classes)? })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome<T> {
    pub params: ProbeParams<T>,
    pub train_accuracy: f64,
    pub test: Metrics,
}

fn check_classes(labels: &[usize], num_classes: usize) -> Result<(), EvalError> {
    for class in 0..num_classes {
        if !labels.contains(&class) {
            return Err(EvalError::ClassAbsent(class));
        }
    }
    Ok(())
}

/// Full-batch softmax regression with momentum on standardized features.
pub fn train_linear_probe<T: Scalar>(
    train_x: &Tensor<T>,
    train_y: &[usize],
    test_x: &Tensor<T>,
    test_y: &[usize],
    num_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeOutcome<T>, EvalError> {
    let (n, d) = train_x.dims2("train_linear_probe")?;
    if n != train_y.len() {
        return Err(EvalError::LengthMismatch(n, train_y.len()));
    }
    check_classes(train_y, num_classes)?;
    let standardizer = Standardizer::fit(train_x)?;
    let x = standardizer.apply(train_x);
    let mut linear = Linear { weight: Tensor::zeros(&[d, num_classes]), bias: Tensor::zeros(&[num_classes]) };
    let mut velocity = vec![Tensor::zeros(&[d, num_classes]), Tensor::zeros(&[num_classes])];
    let (lr, momentum) = (T::of(config.lr), T::of(config.momentum));
    for _ in 0..config.epochs {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (w, b) = (g.param(linear.weight.clone()), g.param(linear.bias.clone()));
        let xw = g.matmul(xv, w)?;
        let logits = g.add_bias(xw, b)?;
        let loss = g.cross_entropy(logits, train_y)?;
        g.backward(loss)?;
        let grads = [g.grad(w).cloned().expect("param"), g.grad(b).cloned().expect("param")];
        sgd_step(vec![&mut linear.weight, &mut linear.bias], &grads, &mut velocity, lr, momentum)?;
    }
    let params = ProbeParams { standardizer, linear };
    let train_probs = params.predict_proba(train_x)?;
    let train_preds: Vec<usize> = train_probs.chunks(num_classes).map(argmax).collect();
    let train_accuracy = accuracy(&train_preds, train_y)?;
    let test = score(&params.predict_proba(test_x)?, test_y, num_classes)?;
    Ok(ProbeOutcome { params, train_accuracy, test })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport<T> {
    pub params: ProbeParams<T>,
    pub val: Metrics,
    pub test: Metrics,
}

/// Samples balanced patch sets from the train/val/test slides, embeds them
/// with the frozen `encoder` and fits a linear probe.
pub fn probe_encoder<T: Scalar>(
    encoder: &EncoderParams<T>,
    dataset: &Dataset,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport<T>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9B0E);
    let train = sample_labeled(&dataset.train, config.train_per_class, &mut rng)?;
    let val = sample_labeled(&dataset.val, config.val_per_class, &mut rng)?;
    let test = sample_labeled(&dataset.test, config.test_per_class, &mut rng)?;
    let (xtr, xva, xte) = (embed_patches(encoder, &train)?, embed_patches(encoder, &val)?, embed_patches(encoder, &test)?);
    let k = TissueClass::COUNT;
    let outcome = train_linear_probe(&xtr, &train.labels, &xte, &test.labels, k, config)?;
    let val = score(&outcome.params.predict_proba(&xva)?, &val.labels, k)?;
    Ok(ProbeReport { params: outcome.params, val, test: outcome.test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub widths: EncoderWidths,
    /// Permute training labels (chance-level control).
    pub shuffle_labels: bool,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            train_per_class: 500,
            test_per_class: 250,
            epochs: 20,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            widths: EncoderWidths::default(),
            shuffle_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedReport<T> {
    pub encoder: EncoderParams<T>,
    pub head: Linear<T>,
    pub train_accuracy: f64,
    pub test: Metrics,
}

/// Trains the perceptron backbone and a linear head end to end on patch
/// labels.
pub fn train_supervised_baseline<T: Scalar>(
    dataset: &Dataset,
    config: &SupervisedConfig,
    seed: u64,
) -> Result<SupervisedReport<T>, EvalError> {
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(EvalError::Config("batch_size and epochs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E9);
    let train = sample_labeled(&dataset.train, config.train_per_class, &mut rng)?;
    let test = sample_labeled(&dataset.test, config.test_per_class, &mut rng)?;
    let mut labels = train.labels.clone();
    if config.shuffle_labels {
        labels.shuffle(&mut rng);
    }
    let k = TissueClass::COUNT;
    let len = train.dims.len();
    let mut encoder = init_params::<T>(seed, len, &config.widths);
    let mut head = Linear::init(config.widths.embedding, k, &mut rng);
    let mut velocity: Vec<Tensor<T>> = encoder
        .tensors()
        .into_iter()
        .chain([&head.weight, &head.bias])
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let (lr, momentum) = (T::of(config.lr), T::of(config.momentum));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let pixels: Vec<f32> = batch.iter().flat_map(|&i| train.pixels[i * len..(i + 1) * len].iter().copied()).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = encoder.register(&mut g);
            let (hw, hb) = (g.param(head.weight.clone()), g.param(head.bias.clone()));
            let x = g.constant(images_to_tensor(&pixels, len)?);
            let e = vars.embed(&mut g, x)?;
            let xw = g.matmul(e, hw)?;
            let logits = g.add_bias(xw, hb)?;
            let loss = g.cross_entropy(logits, &y)?;
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars
                .vars()
                .into_iter()
                .chain([hw, hb])
                .map(|v| g.grad(v).cloned().expect("param"))
                .collect();
            let mut params = encoder.tensors_mut();
            params.extend([&mut head.weight, &mut head.bias]);
            sgd_step(params, &grads, &mut velocity, lr, momentum)?;
        }
    }
    let logits = |p: &LabeledPatches| -> Result<Tensor<T>, EvalError> {
        Ok(head.forward(&embed_patches(&encoder, p)?)?)
    };
    let train_probs = softmax_rows_f64(&logits(&train)?);
    let train_preds: Vec<usize> = train_probs.chunks(k).map(argmax).collect();
    let train_accuracy = accuracy(&train_preds, &labels)?;
    let test = score(&softmax_rows_f64(&logits(&test)?), &test.labels, k)?;
    Ok(SupervisedReport { encoder, head, train_accuracy, test })
}
