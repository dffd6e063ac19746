//! Joint-embedding losses (Barlow Twins, VICReg, BYOL) and the α-weighted
//! mix of a contextual and a standard term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::{GradError, Graph, Tensor, Var};
use crate::scalar::Scalar;

pub const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SslError {
    #[error("alpha = {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SslMethod {
    #[serde(rename = "bt", alias = "barlow_twins")]
    BarlowTwins,
    #[serde(rename = "byol")]
    Byol,
    #[serde(rename = "vicreg")]
    Vicreg,
}

impl SslMethod {
    pub const ALL: [SslMethod; 3] = [Self::BarlowTwins, Self::Byol, Self::Vicreg];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::BarlowTwins => "bt",
            Self::Byol => "byol",
            Self::Vicreg => "vicreg",
        }
    }
}

impl std::fmt::Display for SslMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

impl std::str::FromStr for SslMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bt" | "barlow_twins" | "barlowtwins" => Ok(Self::BarlowTwins),
            "byol" => Ok(Self::Byol),
            "vicreg" => Ok(Self::Vicreg),
            other => Err(format!("unknown method {other:?} (expected bt, byol or vicreg)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VicregCoefficients {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    /// Target standard deviation.
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for VicregCoefficients {
    fn default() -> Self {
        Self { invariance: 25.0, variance: 25.0, covariance: 1.0, gamma: 1.0, epsilon: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedLossConfig {
    /// Weight of the contextual term.
    pub alpha: f64,
    pub method: SslMethod,
    pub bt_lambda: f64,
    pub vicreg: VicregCoefficients,
    /// EMA decay of the BYOL target network.
    pub byol_tau: f64,
}

impl Default for CombinedLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            method: SslMethod::BarlowTwins,
            bt_lambda: 0.005,
            vicreg: VicregCoefficients::default(),
            byol_tau: 0.99,
        }
    }
}

impl CombinedLossConfig {
    pub fn validate(&self) -> Result<(), SslError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SslError::AlphaOutOfRange(self.alpha));
        }
        let v = &self.vicreg;
        if !(self.bt_lambda > 0.0) {
            return Err(SslError::Config("bt_lambda must be positive".into()));
        }
        if !(v.invariance >= 0.0 && v.variance >= 0.0 && v.covariance >= 0.0 && v.gamma > 0.0 && v.epsilon > 0.0) {
            return Err(SslError::Config("VICReg coefficients out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.byol_tau) {
            return Err(SslError::Config("byol_tau must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, za: Var, zb: Var, op: &'static str) -> Result<(usize, usize), GradError> {
    g.value(za).same_shape(g.value(zb), op)?;
    let (n, d) = g.value(za).dims2(op)?;
    if n < 2 {
        return Err(GradError::DegenerateBatch { op, rows: n });
    }
    Ok((n, d))
}

/// Constant `D×D` matrix with `on` on the diagonal and `off` elsewhere.
fn diag_weights<T: Scalar>(d: usize, on: T, off: T) -> Tensor<T> {
    let mut w = Tensor::full(&[d, d], off);
    for i in 0..d {
        w.data_mut()[i * d + i] = on;
    }
    w
}

/// `Σᵢ(1 − Cᵢᵢ)² + λ·Σ_{i≠j} Cᵢⱼ²` with `C` the cross-correlation of the
/// column-standardized batches.
pub fn barlow_twins_loss<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, lambda: T) -> Result<Var, GradError> {
    let (n, d) = check_pair(g, za, zb, "barlow_twins_loss")?;
    let eps = T::of(STANDARDIZE_EPS);
    let sa = g.batch_standardize(za, eps)?;
    let sb = g.batch_standardize(zb, eps)?;
    let sat = g.transpose(sa)?;
    let prod = g.matmul(sat, sb)?;
    let c = g.scale(prod, T::one() / T::of(n as f64));
    let eye = g.constant(Tensor::identity(d));
    let diff = g.sub(c, eye)?;
    let sq = g.square(diff);
    let w = g.constant(diag_weights(d, T::one(), lambda));
    let weighted = g.mul(sq, w)?;
    g.sum(weighted, None)
}

/// `(1/D)·Σⱼ max(0, γ − sqrt(Var(zⱼ) + ε))` and `(1/D)·Σ_{i≠j} Cov(Z)ᵢⱼ²`,
/// with unbiased (N−1) variance and covariance.
fn vicreg_regularizers<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    gamma: T,
    epsilon: T,
) -> Result<(Var, Var), GradError> {
    let (n, d) = g.value(z).dims2("vicreg_loss")?;
    let inv_nm1 = T::one() / T::of((n - 1) as f64);
    let centered = g.center_columns(z)?;
    let sq = g.square(centered);
    let col_ss = g.sum(sq, Some(0))?;
    let var = g.scale(col_ss, inv_nm1);
    let var_eps = g.add_scalar(var, epsilon);
    let std = g.sqrt(var_eps)?;
    let neg = g.scale(std, -T::one());
    let gap = g.add_scalar(neg, gamma);
    let hinge = g.relu(gap);
    let variance = g.mean(hinge, None)?;

    let ct = g.transpose(centered)?;
    let gram = g.matmul(ct, centered)?;
    let cov = g.scale(gram, inv_nm1);
    let cov_sq = g.square(cov);
    let mask = g.constant(diag_weights(d, T::zero(), T::one()));
    let off = g.mul(cov_sq, mask)?;
    let off_sum = g.sum(off, None)?;
    let covariance = g.scale(off_sum, T::one() / T::of(d as f64));
    Ok((variance, covariance))
}

pub fn vicreg_loss<T: Scalar>(
    g: &mut Graph<T>,
    za: Var,
    zb: Var,
    coefficients: &VicregCoefficients,
) -> Result<Var, GradError> {
    check_pair(g, za, zb, "vicreg_loss")?;
    let (gamma, eps) = (T::of(coefficients.gamma), T::of(coefficients.epsilon));
    let diff = g.sub(za, zb)?;
    let sq = g.square(diff);
    let mse = g.mean(sq, None)?;
    let (va, ca) = vicreg_regularizers(g, za, gamma, eps)?;
    let (vb, cb) = vicreg_regularizers(g, zb, gamma, eps)?;
    let var = g.add(va, vb)?;
    let cov = g.add(ca, cb)?;
    let inv = g.scale(mse, T::of(coefficients.invariance));
    let var = g.scale(var, T::of(coefficients.variance));
    let cov = g.scale(cov, T::of(coefficients.covariance));
    let partial = g.add(inv, var)?;
    g.add(partial, cov)
}

/// Mean over rows of `2 − 2·cos(q, z)`. The target is detached, so no
/// gradient reaches whatever produced `target`.
pub fn byol_pair_loss<T: Scalar>(g: &mut Graph<T>, prediction: Var, target: Var) -> Result<Var, GradError> {
    g.value(prediction).same_shape(g.value(target), "byol_pair_loss")?;
    let target = g.detach(target);
    let qn = g.normalize_rows(prediction)?;
    let zn = g.normalize_rows(target)?;
    let prod = g.mul(qn, zn)?;
    let cos = g.sum(prod, Some(1))?;
    let mean_cos = g.mean(cos, None)?;
    let scaled = g.scale(mean_cos, -T::of(2.0));
    Ok(g.add_scalar(scaled, T::of(2.0)))
}

/// `α·ctx + (1 − α)·std`, evaluating a branch only when its weight is
/// non-zero. At `α = 0` the standard branch's node is returned unchanged;
/// at `α = 1`, the contextual one.
pub fn combined_loss<T, C, S>(g: &mut Graph<T>, alpha: f64, ctx: C, std: S) -> Result<Var, SslError>
where
    T: Scalar,
    C: FnOnce(&mut Graph<T>) -> Result<Var, SslError>,
    S: FnOnce(&mut Graph<T>) -> Result<Var, SslError>,
{
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SslError::AlphaOutOfRange(alpha));
    }
    if alpha == 0.0 {
        return std(g);
    }
    if alpha == 1.0 {
        return ctx(g);
    }
    let lc = ctx(g)?;
    let ls = std(g)?;
    let a = g.scale(lc, T::of(alpha));
    let b = g.scale(ls, T::of(1.0 - alpha));
    Ok(g.add(a, b)?)
}
