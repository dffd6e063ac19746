use super::{GradError, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = (analytic.abs() + numeric.abs()).max(T::of(1e-12));
    (analytic - numeric).abs() / denom
}

/// Compares the graph gradient of `f` at `x` with central differences and
/// returns the largest per-coordinate [`relative_error`].
///
/// `f` receives a fresh graph and the trainable leaf holding `x`, and must
/// return a one-element loss node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T, GradError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var, GradError>,
{
    let value = |t: &Tensor<T>| -> Result<T, GradError> {
        let mut g = Graph::new();
        let leaf = g.constant(t.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item())
    };
    let gradient = |t: &Tensor<T>| -> Result<Tensor<T>, GradError> {
        let mut g = Graph::new();
        let leaf = g.param(t.clone());
        let out = f(&mut g, leaf)?;
        g.backward(out)?;
        Ok(g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
    };
    grad_check_with(value, gradient, x, step)
}

/// Finite-difference check against a caller-supplied gradient.
pub fn grad_check_with<T, V, G>(value: V, gradient: G, x: &Tensor<T>, step: T) -> Result<T, GradError>
where
    T: Scalar,
    V: Fn(&Tensor<T>) -> Result<T, GradError>,
    G: Fn(&Tensor<T>) -> Result<Tensor<T>, GradError>,
{
    if !(step > T::zero()) {
        return Err(GradError::InvalidArgument("finite-difference step must be positive".into()));
    }
    let f0 = value(x)?;
    if !f0.is_finite() {
        return Err(GradError::NonFinite(format!("f(x) = {f0}")));
    }
    let analytic = gradient(x)?;
    x.same_shape(&analytic, "grad_check")?;
    let two_h = step + step;
    let mut worst = T::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(GradError::NonFinite(format!("f near coordinate {i}")));
        }
        let numeric = (up - down) / two_h;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
