use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate of the gradient of a scalar function.
pub fn central_difference(f: impl Fn(&[f64]) -> Result<f64>, point: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences of step `h` and returns the maximum relative error.
///
/// `f` receives a fresh tape and a leaf holding the (possibly perturbed)
/// point, and must return a scalar node.
pub fn gradient_check<F>(f: F, point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::contract("gradient_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(point.to_vec()), true);
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(x, tape.value(x)).into_data();

    let eval = |p: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(p.to_vec()), false);
        let y = f(&mut t, x)?;
        Ok(t.value(y).item())
    };
    let numeric = central_difference(eval, point, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}
