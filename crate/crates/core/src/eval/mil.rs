use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::probe::{embed_pixels, score, softmax_rows_f64};
use super::{accuracy, argmax, EvalError, Metrics, Standardizer};
use crate::ndgrad::{GradError, Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::slidegen::{TissueClass, VirtualSlide};
use crate::train::{sgd_step, EncoderParams, Linear, LinearVars};

/// Frozen embeddings of one slide's patches with the slide label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag<T> {
    pub slide_id: u32,
    /// `n × D`
    pub instances: Tensor<T>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Patches embedded per slide; `None` uses every cell.
    pub max_instances: Option<usize>,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self { hidden: 32, epochs: 40, lr: 0.01, momentum: 0.9, max_instances: Some(128) }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.hidden == 0 || self.epochs == 0 {
            return Err(EvalError::Config("MIL hidden width and epochs must be positive".into()));
        }
        if self.max_instances == Some(0) {
            return Err(EvalError::Config("max_instances must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(EvalError::Config("MIL needs lr > 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Attention pooling: `a = softmax(tanh(H·V)·w)`, `z = aᵀH`,
/// followed by a linear classifier on `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilParams<T> {
    /// `D × hidden`
    pub v: Tensor<T>,
    /// `hidden × 1`
    pub w: Tensor<T>,
    pub classifier: Linear<T>,
}

struct MilVars {
    v: Var,
    w: Var,
    classifier: LinearVars,
}

impl<T: Scalar> MilParams<T> {
    pub fn init(seed: u64, dim: usize, hidden: usize, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Linear::<T>::init(dim, hidden, &mut rng).weight;
        let w = Linear::<T>::init(hidden, 1, &mut rng).weight;
        let classifier = Linear::init(dim, num_classes, &mut rng);
        Self { v, w, classifier }
    }

    fn register(&self, g: &mut Graph<T>) -> MilVars {
        MilVars { v: g.param(self.v.clone()), w: g.param(self.w.clone()), classifier: self.classifier.register(g) }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.v, &mut self.w, &mut self.classifier.weight, &mut self.classifier.bias]
    }
}

impl MilVars {
    fn vars(&self) -> [Var; 4] {
        [self.v, self.w, self.classifier.weight, self.classifier.bias]
    }

    /// `(1 × C logits, n × 1 attention)`
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, h: Var) -> Result<(Var, Var), GradError> {
        let hv = g.matmul(h, self.v)?;
        let t = g.tanh(hv);
        let s = g.matmul(t, self.w)?;
        let a = g.softmax_columns(s)?;
        let at = g.transpose(a)?;
        let z = g.matmul(at, h)?;
        Ok((self.classifier.forward(g, z)?, a))
    }
}

/// Class probabilities and attention weights for one bag.
pub fn abmil_forward<T: Scalar>(params: &MilParams<T>, instances: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let h = g.constant(instances.clone());
    let (logits, a) = vars.forward(&mut g, h)?;
    let probs = softmax_rows_f64(g.value(logits));
    let attention = g.value(a).data().iter().map(|v| v.as_f64()).collect();
    Ok((probs, attention))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilOutcome<T> {
    pub params: MilParams<T>,
    pub standardizer: Standardizer<T>,
    pub train_accuracy: f64,
    pub test: Metrics,
}

impl<T: Scalar> MilOutcome<T> {
    pub fn predict_proba(&self, bag: &Bag<T>) -> Result<Vec<f64>, EvalError> {
        Ok(abmil_forward(&self.params, &self.standardizer.apply(&bag.instances))?.0)
    }
}

fn check_bags<T: Scalar>(bags: &[Bag<T>]) -> Result<(), EvalError> {
    for b in bags {
        if b.instances.shape().first().copied().unwrap_or(0) == 0 {
            return Err(EvalError::EmptyBag(b.slide_id));
        }
    }
    Ok(())
}

fn evaluate<T: Scalar>(outcome: &MilOutcome<T>, bags: &[Bag<T>], num_classes: usize) -> Result<(Vec<f64>, Vec<usize>), EvalError> {
    let mut probs = Vec::with_capacity(bags.len() * num_classes);
    for b in bags {
        probs.extend(outcome.predict_proba(b)?);
    }
    Ok((probs, bags.iter().map(|b| b.label).collect()))
}

/// Trains attention MIL with per-bag SGD on standardized instances and
/// scores it on `test`.
pub fn train_mil<T: Scalar>(
    train: &[Bag<T>],
    test: &[Bag<T>],
    num_classes: usize,
    config: &MilConfig,
    seed: u64,
) -> Result<MilOutcome<T>, EvalError> {
    config.validate()?;
    check_bags(train)?;
    check_bags(test)?;
    let first = train.first().ok_or(EvalError::SingleClass)?;
    if train.iter().all(|b| b.label == first.label) {
        return Err(EvalError::SingleClass);
    }
    let (_, dim) = first.instances.dims2("train_mil")?;
    let mut rows = Vec::new();
    for b in train {
        if b.instances.dims2("train_mil")?.1 != dim {
            return Err(EvalError::Config(format!("bag {} has a different embedding width", b.slide_id)));
        }
        rows.extend_from_slice(b.instances.data());
    }
    let all = Tensor::new(vec![rows.len() / dim, dim], rows)?;
    let standardizer = Standardizer::fit(&all)?;
    let inputs: Vec<Tensor<T>> = train.iter().map(|b| standardizer.apply(&b.instances)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MilParams::init(rng.random(), dim, config.hidden, num_classes);
    let mut velocity: Vec<Tensor<T>> = params.tensors_mut().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (lr, momentum) = (T::of(config.lr), T::of(config.momentum));
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let mut g = Graph::new();
            let vars = params.register(&mut g);
            let h = g.constant(inputs[i].clone());
            let (logits, _) = vars.forward(&mut g, h)?;
            let loss = g.cross_entropy(logits, &[train[i].label])?;
            g.backward(loss)?;
            let grads: Vec<Tensor<T>> = vars.vars().iter().map(|&v| g.grad(v).cloned().expect("param")).collect();
            sgd_step(params.tensors_mut(), &grads, &mut velocity, lr, momentum)?;
        }
    }
    let mut outcome = MilOutcome { params, standardizer, train_accuracy: 0.0, test: Metrics { accuracy: 0.0, auroc: 0.0 } };
    let (probs, labels) = evaluate(&outcome, train, num_classes)?;
    let preds: Vec<usize> = probs.chunks(num_classes).map(argmax).collect();
    outcome.train_accuracy = accuracy(&preds, &labels)?;
    let (probs, labels) = evaluate(&outcome, test, num_classes)?;
    outcome.test = score(&probs, &labels, num_classes)?;
    Ok(outcome)
}

/// One bag per slide: a random subset of its cells (or all of them) embedded
/// with the frozen `encoder`.
pub fn build_bags<T: Scalar, R: Rng + ?Sized>(
    encoder: &EncoderParams<T>,
    slides: &[VirtualSlide],
    max_instances: Option<usize>,
    rng: &mut R,
) -> Result<Vec<Bag<T>>, EvalError> {
    let mut bags = Vec::with_capacity(slides.len());
    for s in slides {
        let n = s.cell_count();
        if n == 0 {
            return Err(EvalError::EmptyBag(s.slide_id));
        }
        let mut cells: Vec<usize> = match max_instances {
            Some(m) if m < n => index::sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        cells.sort_unstable();
        let len = s.dims.len();
        let pixels: Vec<f32> = cells.iter().flat_map(|&c| s.patch_at(c).iter().copied()).collect();
        let instances = embed_pixels(encoder, &pixels, len)?;
        bags.push(Bag { slide_id: s.slide_id, instances, label: s.slide_label.index() });
    }
    Ok(bags)
}

/// Builds train/test bags from the dataset splits and trains MIL on them.
pub fn mil_encoder<T: Scalar>(
    encoder: &EncoderParams<T>,
    train: &[VirtualSlide],
    test: &[VirtualSlide],
    config: &MilConfig,
    seed: u64,
) -> Result<MilOutcome<T>, EvalError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB465);
    let train_bags = build_bags(encoder, train, config.max_instances, &mut rng)?;
    let test_bags = build_bags(encoder, test, config.max_instances, &mut rng)?;
    train_mil(&train_bags, &test_bags, TissueClass::COUNT, config, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_sums_to_one() {
        let p = MilParams::<f64>::init(1, 4, 3, 3);
        let x = Tensor::from_f64(vec![5, 4], &(0..20).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let (probs, att) = abmil_forward(&p, &x).unwrap();
        assert!((att.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let x = Tensor::<f64>::ones(&[2, 3]);
        let bags: Vec<Bag<f64>> = (0..3).map(|i| Bag { slide_id: i, instances: x.clone(), label: 1 }).collect();
        let r = train_mil(&bags, &bags, 3, &MilConfig::default(), 0);
        assert_eq!(r.unwrap_err(), EvalError::SingleClass);
    }
}
