//! Downstream evaluation of frozen encoders: patch-level linear probing,
//! attention-based MIL on slide bags, a supervised baseline, and metrics.

mod metrics;
mod mil;
mod probe;

pub use metrics::{accuracy, auroc, macro_auroc, Metrics};
pub use mil::{abmil_forward, build_bags, mil_encoder, train_mil, Bag, MilConfig, MilOutcome, MilParams};
pub use probe::{
    embed_patches, probe_encoder, sample_labeled, train_linear_probe, train_supervised_baseline, LabeledPatches,
    ProbeConfig, ProbeOutcome, ProbeParams, ProbeReport, SupervisedConfig, SupervisedReport,
};

use thiserror::Error;

use crate::ndgrad::{GradError, Tensor};
use crate::scalar::Scalar;
use crate::train::TrainError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("bag for slide {0} is empty")]
    EmptyBag(u32),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("class {0} is absent from the sampled data")]
    ClassAbsent(usize),
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Column standardization fitted on training features.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn fit(x: &Tensor<T>) -> Result<Self, GradError> {
        let (n, d) = x.dims2("standardizer")?;
        let inv_n = T::one() / T::of(n as f64);
        let mut mean = vec![T::zero(); d];
        for row in x.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m = *m + v * inv_n);
        }
        let mut var = vec![T::zero(); d];
        for row in x.data().chunks(d) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((s, &v), &m)| *s = *s + (v - m) * (v - m) * inv_n);
        }
        let eps = T::of(1e-8);
        let inv_std = var.iter().map(|&v| if v.sqrt() > eps { T::one() / v.sqrt() } else { T::zero() }).collect();
        Ok(Self { mean, inv_std })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let d = self.mean.len();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
