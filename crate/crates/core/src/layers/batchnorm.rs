//! Quaternion batch norm: per-channel division by a running RMS magnitude.
//!
//! No shift is applied, since subtracting a mean would inject a translation
//! that does not commute with rotations.

use serde::{Deserialize, Serialize};

use crate::autodiff::Function;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QBatchNormState {
    pub mu: Vec<f64>,
    pub epsilon: f64,
    pub mode: Mode,
}

impl QBatchNormState {
    pub fn new(channels: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::config(format!("batch norm momentum {epsilon} not in (0, 1]")));
        }
        Ok(Self {
            mu: vec![1.0; channels],
            epsilon,
            mode: Mode::Train,
        })
    }
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [m, c, n, 4] if m * n > 0 => Ok((m, c, n)),
        _ => Err(Error::contract(format!(
            "qbatchnorm: expected non-empty [batch, channels, length, 4], got {:?}",
            x.shape()
        ))),
    }
}

/// `sqrt(Σ_j Σ_i |q_i^(j)[k]|² / (m n))` for every channel `k`.
pub fn channel_rms(x: &Tensor) -> Result<Vec<f64>> {
    let (m, c, n) = dims(x)?;
    let mut sums = vec![0.0; c];
    for (row, q) in x.data().chunks_exact(4 * n).enumerate() {
        let k = row % c;
        sums[k] += q.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(sums.into_iter().map(|s| (s / (m * n) as f64).sqrt()).collect())
}

/// Running update `μ ← (1-ε)μ + ε·rms`, skipped for all-zero channels.
pub fn updated_mu(mu: &[f64], rms: &[f64], epsilon: f64) -> Vec<f64> {
    mu.iter()
        .zip(rms)
        .map(|(&m, &r)| if r > 0.0 { (1.0 - epsilon) * m + epsilon * r } else { m })
        .collect()
}

/// In train mode updates `state.mu` first and then divides by it; in eval
/// mode divides by the stored `mu` only.
pub fn qbatchnorm_forward(batch: &Tensor, state: &mut QBatchNormState) -> Result<Tensor> {
    let (_, c, _) = dims(batch)?;
    if state.mu.len() != c {
        return Err(Error::contract(format!(
            "qbatchnorm: state has {} channels, input has {c}",
            state.mu.len()
        )));
    }
    let op = match state.mode {
        Mode::Train => {
            let rms = channel_rms(batch)?;
            state.mu = updated_mu(&state.mu, &rms, state.epsilon);
            QBatchNormOp::train(state.mu.clone(), rms, state.epsilon)
        }
        Mode::Eval => QBatchNormOp::eval(state.mu.clone()),
    };
    op.forward(&[batch])
}

/// Tape primitive dividing each channel by a fixed `mu`. In train mode the
/// divisor depends on the batch through its RMS and the backward pass
/// accounts for that.
pub struct QBatchNormOp {
    mu: Vec<f64>,
    rms: Option<Vec<f64>>,
    epsilon: f64,
}

impl QBatchNormOp {
    pub fn train(mu: Vec<f64>, rms: Vec<f64>, epsilon: f64) -> Self {
        Self {
            mu,
            rms: Some(rms),
            epsilon,
        }
    }

    pub fn eval(mu: Vec<f64>) -> Self {
        Self {
            mu,
            rms: None,
            epsilon: 0.0,
        }
    }
}

impl Function for QBatchNormOp {
    fn name(&self) -> &'static str {
        "qbatchnorm"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (_, c, n) = dims(x)?;
        if self.mu.len() != c {
            return Err(Error::contract("qbatchnorm: channel count mismatch"));
        }
        let mut out = x.clone();
        for (row, vals) in out.data_mut().chunks_exact_mut(4 * n).enumerate() {
            let inv = 1.0 / self.mu[row % c];
            for v in vals {
                *v *= inv;
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (m, c, n) = dims(x)?;
        let mut gx = g.clone();
        for (row, vals) in gx.data_mut().chunks_exact_mut(4 * n).enumerate() {
            let inv = 1.0 / self.mu[row % c];
            for v in vals {
                *v *= inv;
            }
        }
        if let Some(rms) = &self.rms {
            // dμ_k/dx = ε x / (m n rms_k) for channels where the update ran
            let mut gx_dot = vec![0.0; c];
            for (row, (gv, xv)) in g.data().chunks_exact(4 * n).zip(x.data().chunks_exact(4 * n)).enumerate() {
                gx_dot[row % c] += gv.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
            let coef: Vec<f64> = (0..c)
                .map(|k| {
                    if rms[k] > 0.0 {
                        -gx_dot[k] / (self.mu[k] * self.mu[k]) * self.epsilon / ((m * n) as f64 * rms[k])
                    } else {
                        0.0
                    }
                })
                .collect();
            for (row, (gv, xv)) in gx.data_mut().chunks_exact_mut(4 * n).zip(x.data().chunks_exact(4 * n)).enumerate() {
                let k = coef[row % c];
                for (a, b) in gv.iter_mut().zip(xv) {
                    *a += k * b;
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, Tape};
    use crate::quaternion::{conjugation_rotate, random_unit_quaternion, Quaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_momentum_normalizes_exactly() {
        let mut data = Vec::new();
        for _ in 0..3 * 5 {
            data.extend([0.0, 2.0, 0.0, 0.0]);
        }
        let x = Tensor::new(vec![3, 1, 5, 4], data).unwrap();
        let mut st = QBatchNormState::new(1, 1.0).unwrap();
        let y = qbatchnorm_forward(&x, &mut st).unwrap();
        assert_eq!(st.mu, vec![2.0]);
        for q in y.data().chunks_exact(4) {
            assert_eq!(Quaternion::from_slice(q).norm(), 1.0);
        }
    }

    #[test]
    fn eval_divides_without_update() {
        let x = Tensor::new(vec![1, 1, 1, 4], vec![0.0, 2.0, 0.0, 0.0]).unwrap();
        let mut st = QBatchNormState::new(1, 0.1).unwrap();
        st.mu = vec![2.0];
        st.mode = Mode::Eval;
        let y = qbatchnorm_forward(&x, &mut st).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(st.mu, vec![2.0]);
    }

    #[test]
    fn zero_channel_skips_update() {
        let x = Tensor::zeros(&[2, 2, 3, 4]);
        let mut st = QBatchNormState::new(2, 0.5).unwrap();
        qbatchnorm_forward(&x, &mut st).unwrap();
        assert_eq!(st.mu, vec![1.0, 1.0]);
    }

    #[test]
    fn running_update_formula() {
        let mu = updated_mu(&[1.0, 3.0], &[2.0, 1.0], 0.25);
        assert_eq!(mu, vec![1.25, 2.5]);
        assert!(QBatchNormState::new(1, 0.0).is_err());
        assert!(QBatchNormState::new(1, 1.5).is_err());
    }

    #[test]
    fn rotation_commutes_with_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2 * 3 * 6 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![2, 3, 6, 4], data).unwrap();
        let r = random_unit_quaternion(&mut rng);
        let mut xr = x.clone();
        for q in xr.data_mut().chunks_exact_mut(4) {
            conjugation_rotate(r, Quaternion::from_slice(q)).unwrap().write_to(q);
        }
        let mut s1 = QBatchNormState::new(3, 0.3).unwrap();
        let mut s2 = s1.clone();
        let y = qbatchnorm_forward(&x, &mut s1).unwrap();
        let yr = qbatchnorm_forward(&xr, &mut s2).unwrap();
        for (a, b) in s1.mu.iter().zip(&s2.mu) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in y.data().chunks_exact(4).zip(yr.data().chunks_exact(4)) {
            let ra = conjugation_rotate(r, Quaternion::from_slice(a)).unwrap();
            assert!((ra - Quaternion::from_slice(b)).norm() < 1e-12);
        }
    }

    #[test]
    fn train_mode_gradient_includes_running_statistic() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let point: Vec<f64> = (0..2 * 2 * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..point.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu0 = vec![0.8, 1.3];
        let err = gradient_check(
            |t: &mut Tape, v| {
                let x = t.reshape(v, vec![2, 2, 3, 4])?;
                let rms = channel_rms(t.value(x))?;
                let mu = updated_mu(&mu0, &rms, 0.3);
                let y = t.record(QBatchNormOp::train(mu, rms, 0.3), &[x])?;
                let wc = t.constant(Tensor::new(vec![2, 2, 3, 4], w.clone())?);
                let p = t.mul(wc, y)?;
                t.sum(p)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }
}
