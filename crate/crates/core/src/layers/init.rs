//! Parameter initialization.
//!
//! Quaternion filters draw `a` He-style from the receptive-field fan-in,
//! `b ~ N(0, 1/4)` to match the scalar-part variance of `N(0, I₄/4)` inputs,
//! and `c ~ N(0, 1.3780² - 1/4)` so that the scalar part of the rotation
//! factor `pivot + c` has standard deviation 1.3780, which spreads rotation
//! angles roughly uniformly over `[0, 2π]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::qconv::QConvParams;

/// Standard deviation of the rotation factor's scalar part.
pub const ROTATION_SCALAR_STD: f64 = 1.3780;
/// Variance of a quaternion input's scalar part under `N(0, I₄/4)`.
pub const INPUT_COMPONENT_VARIANCE: f64 = 0.25;
pub const BIAS_VARIANCE: f64 = INPUT_COMPONENT_VARIANCE;
pub const ROTATION_OFFSET_VARIANCE: f64 = ROTATION_SCALAR_STD * ROTATION_SCALAR_STD - INPUT_COMPONENT_VARIANCE;

fn normal(variance: f64) -> Normal<f64> {
    Normal::new(0.0, variance.sqrt()).expect("variance is finite and positive")
}

/// He-normal variance `2 / fan_in`.
pub fn he_variance(fan_in: usize) -> f64 {
    2.0 / fan_in.max(1) as f64
}

pub fn init_qconv<R: Rng + ?Sized>(params: &mut QConvParams, rng: &mut R) {
    let fan_in = params.config.taps * params.config.in_channels;
    let (da, db, dc) = (
        normal(he_variance(fan_in)),
        normal(BIAS_VARIANCE),
        normal(ROTATION_OFFSET_VARIANCE),
    );
    for v in params.a.iter_mut() {
        *v = da.sample(rng);
    }
    for v in params.b.iter_mut() {
        *v = db.sample(rng);
    }
    for v in params.c.iter_mut() {
        *v = dc.sample(rng);
    }
}

/// He-normal weights followed by zero biases, for the packed
/// `[weights | bias]` layout of conv1d and dense layers.
pub fn init_real_layer<R: Rng + ?Sized>(packed: &mut [f64], weight_len: usize, fan_in: usize, rng: &mut R) {
    let d = normal(he_variance(fan_in));
    let (w, b) = packed.split_at_mut(weight_len);
    for v in w {
        *v = d.sample(rng);
    }
    b.fill(0.0);
}
