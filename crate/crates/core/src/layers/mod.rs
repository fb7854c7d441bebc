//! Network layers: quaternion convolution and batch norm, their real-valued
//! counterparts, initialization and the layer-stack builder.

pub mod batchnorm;
pub mod init;
pub mod model;
pub mod qconv;
pub mod real;

pub use batchnorm::{channel_rms, qbatchnorm_forward, updated_mu, Mode, QBatchNormOp, QBatchNormState, DEFAULT_MOMENTUM};
pub use init::{he_variance, init_qconv, init_real_layer};
pub use model::{build_network, Forward, InputEncoding, LayerSpec, Model, ModelSpec, Stream};
pub use qconv::{qconv_forward, qconv_window, InverseForm, QConvConfig, QConvOp, QConvParams, ROTATION_GUARD};
pub use real::{conv1d_forward, dense_forward, log_softmax_cross_entropy, relu, Conv1dConfig, Conv1dOp};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::quaternion::{conjugation_rotate, random_unit_quaternion, Quaternion};
use crate::tensor::Tensor;

/// `|q|` per quaternion of a `[..., 4]` tensor.
pub fn readout_magnitude(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let data = x.data().chunks_exact(4).map(|q| Quaternion::from_slice(q).norm()).collect();
    Tensor::new(shape[..shape.len() - 1].to_vec(), data)
}

/// Scalar part per quaternion of a `[..., 4]` tensor.
pub fn readout_real(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    let data = x.data().chunks_exact(4).map(|q| q[0]).collect();
    Tensor::new(shape[..shape.len() - 1].to_vec(), data)
}

/// Rotates every quaternion of a `[..., 4]` tensor by `r`.
pub fn rotate_tensor(x: &Tensor, r: Quaternion) -> Result<Tensor> {
    let mut out = x.clone();
    for q in out.data_mut().chunks_exact_mut(4) {
        conjugation_rotate(r, Quaternion::from_slice(q))?.write_to(q);
    }
    Ok(out)
}

/// Outcome of [`equivariance_trials`].
#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub trials: usize,
    /// Largest `|f(r x r⁻¹) - r f(x) r⁻¹|` over all outputs and trials.
    pub max_deviation: f64,
    /// Largest `|f(x)|`, for scale.
    pub max_magnitude: f64,
}

/// Compares `f(rotate(x))` with `rotate(f(x))` for random inputs, freshly
/// initialized filters and random rotations.
pub fn equivariance_trials<R: Rng + ?Sized>(config: QConvConfig, length: usize, trials: usize, rng: &mut R) -> Result<EquivarianceReport> {
    config.validate()?;
    let normal = Normal::new(0.0, 0.5).unwrap();
    let mut report = EquivarianceReport {
        trials,
        max_deviation: 0.0,
        max_magnitude: 0.0,
    };
    for _ in 0..trials {
        let mut params = QConvParams::zeros(config)?;
        init_qconv(&mut params, rng);
        let data = (0..config.in_channels * length * 4).map(|_| normal.sample(rng)).collect();
        let x = Tensor::new(vec![1, config.in_channels, length, 4], data)?;
        let r = random_unit_quaternion(rng);
        let (fx, _) = qconv_forward(&x, &params)?;
        let (frx, _) = qconv_forward(&rotate_tensor(&x, r)?, &params)?;
        let rfx = rotate_tensor(&fx, r)?;
        report.max_deviation = report.max_deviation.max(frx.max_abs_diff(&rfx));
        report.max_magnitude = fx.data().iter().fold(report.max_magnitude, |m, v| m.max(v.abs()));
    }
    Ok(report)
}

/// [`equivariance_trials`] over randomly drawn shapes: `L ∈ {1,3,5,7}`,
/// `C_in, C_out ∈ {1,2,4}`, padding `∈ {0,2}`, both inverse forms.
pub fn equivariance_suite<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<EquivarianceReport> {
    let mut total = EquivarianceReport {
        trials,
        max_deviation: 0.0,
        max_magnitude: 0.0,
    };
    for _ in 0..trials {
        let pick = |rng: &mut R, from: &[usize]| from[rng.random_range(0..from.len())];
        let mut cfg = QConvConfig::new(pick(rng, &[1, 2, 4]), pick(rng, &[1, 2, 4]), pick(rng, &[1, 3, 5, 7]));
        cfg.padding = pick(rng, &[0, 2]);
        cfg.form = if rng.random_bool(0.5) { InverseForm::Pivot } else { InverseForm::Literal };
        let length = cfg.taps + rng.random_range(0..12);
        let r = equivariance_trials(cfg, length, 1, rng)?;
        total.max_deviation = total.max_deviation.max(r.max_deviation);
        total.max_magnitude = total.max_magnitude.max(r.max_magnitude);
    }
    Ok(total)
}
