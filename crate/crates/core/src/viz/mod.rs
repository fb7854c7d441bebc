//! Kernel visualization: maximally activating input windows and kernel
//! traces over gait cycles, plus an SVG renderer for the resulting document.

mod svg;

pub use svg::render_svg;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::GaitCycle;
use crate::error::{Error, Result};
use crate::layers::{qconv_forward, qconv_window, LayerSpec, Model, QConvConfig, QConvOp, QConvParams};
use crate::quaternion::Quaternion;
use crate::tensor::Tensor;

const MAX_HALVINGS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelId {
    pub layer: usize,
    pub out_channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFragment {
    pub kernel: KernelId,
    /// Vector parts of the window, in input order; RMS norm 1.
    pub points: Vec<[f64; 3]>,
    pub output_vector: [f64; 3],
    pub output_real: f64,
    pub activation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            step_size: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentResult {
    pub fragment: TrajectoryFragment,
    pub initial_activation: f64,
    pub steps_taken: usize,
    /// The gradient vanished: the filter does not respond to any window
    /// direction from here (e.g. an all-zero filter).
    pub flat: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub position: usize,
    pub real: f64,
    pub vector: [f64; 3],
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTrace {
    pub kernel: KernelId,
    pub cycle: usize,
    pub outputs: Vec<TracePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizDocument {
    pub checkpoint: String,
    pub layer: usize,
    pub seed: u64,
    pub fragments: Vec<TrajectoryFragment>,
    #[serde(default)]
    pub traces: Vec<KernelTrace>,
}

fn qconv_config(model: &Model, layer: usize) -> Result<QConvConfig> {
    match model.spec().layers.get(layer) {
        Some(LayerSpec::Qconv { .. }) => Ok(model.qconv_params(layer)?.config),
        Some(other) => Err(Error::config(format!("layer {layer} is a {} layer, not qconv", other.kind()))),
        None => Err(Error::config(format!("model has no layer {layer}"))),
    }
}

/// Parameters of one output channel as a `C_in → 1` convolution.
pub fn kernel_params(model: &Model, layer: usize, out_channel: usize) -> Result<QConvParams> {
    let full = model.qconv_params(layer)?;
    let cfg = full.config;
    if out_channel >= cfg.out_channels {
        return Err(Error::config(format!(
            "layer {layer} has {} output channels, requested {out_channel}",
            cfg.out_channels
        )));
    }
    let single = QConvConfig {
        out_channels: 1,
        ..cfg
    };
    let n = cfg.in_channels * cfg.taps;
    let r = out_channel * n..(out_channel + 1) * n;
    let mut packed = full.a[r.clone()].to_vec();
    packed.extend_from_slice(&full.b[r.clone()]);
    packed.extend_from_slice(&full.c[r]);
    QConvParams::from_packed(single, &packed)
}

/// Filter output on one window of pure quaternions (vector parts given).
pub fn kernel_response(params: &QConvParams, points: &[[f64; 3]]) -> Result<Quaternion> {
    if params.config.in_channels != 1 || params.config.out_channels != 1 {
        return Err(Error::contract("kernel_response expects a single 1 → 1 filter"));
    }
    let window: Vec<Quaternion> = points.iter().map(|p| Quaternion::new(0.0, p[0], p[1], p[2])).collect();
    Ok(qconv_window(&window, &params.a, &params.b, &params.c, params.config.form)?.0)
}

fn rms_normalize(points: &mut [[f64; 3]]) -> Result<()> {
    let ms = points.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum::<f64>() / points.len() as f64;
    if !(ms > 0.0) || !ms.is_finite() {
        return Err(Error::Domain(format!("cannot normalize window with mean square {ms}")));
    }
    let s = 1.0 / ms.sqrt();
    points.iter_mut().flatten().for_each(|v| *v *= s);
    Ok(())
}

/// Activation and its gradient with respect to the window's vector parts.
fn activation_and_grad(params: &QConvParams, points: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    let l = points.len();
    let data = points.iter().flat_map(|p| [0.0, p[0], p[1], p[2]]).collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1, l, 4], data)?, true);
    let p = tape.constant(Tensor::from_vec(params.packed()));
    let cfg = QConvConfig {
        stride: 1,
        padding: 0,
        ..params.config
    };
    let y = tape.record(QConvOp { config: cfg }, &[x, p])?;
    let m = tape.magnitude(y)?;
    let act = tape.sum(m)?;
    let value = tape.value(act).item();
    let g = tape.backward(act)?.get_or_zeros(x, tape.value(x));
    Ok((value, g.data().chunks_exact(4).map(|q| [q[1], q[2], q[3]]).collect()))
}

fn fragment(kernel: KernelId, params: &QConvParams, points: Vec<[f64; 3]>) -> Result<TrajectoryFragment> {
    let out = kernel_response(params, &points)?;
    Ok(TrajectoryFragment {
        kernel,
        points,
        output_vector: [out.x, out.y, out.z],
        output_real: out.w,
        activation: out.norm(),
    })
}

/// Projected gradient ascent of the output magnitude of one filter over an
/// `L`-tap window of pure quaternions held at RMS norm 1. A step that would
/// lower the activation is retried at half the size.
pub fn maximize_kernel_activation(model: &Model, layer: usize, out_channel: usize, seed: u64, config: &AscentConfig) -> Result<AscentResult> {
    let cfg = qconv_config(model, layer)?;
    if cfg.in_channels != 1 {
        return Err(Error::config(format!(
            "layer {layer} has {} input channels; windows can only be optimized for single-channel layers",
            cfg.in_channels
        )));
    }
    if !(config.step_size > 0.0) {
        return Err(Error::config("step size must be positive"));
    }
    let params = kernel_params(model, layer, out_channel)?;
    let kernel = KernelId { layer, out_channel };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<[f64; 3]> = (0..cfg.taps)
        .map(|_| [0; 3].map(|_| StandardNormal.sample(&mut rng)))
        .collect();
    rms_normalize(&mut points)?;

    let (mut act, mut grad) = activation_and_grad(&params, &points)?;
    let initial = act;
    let mut eta = config.step_size;
    let mut flat = false;
    let mut steps = 0;
    while steps < config.steps {
        if grad.iter().flatten().all(|&g| g == 0.0) {
            flat = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand: Vec<[f64; 3]> = points
                .iter()
                .zip(&grad)
                .map(|(p, g)| [p[0] + eta * g[0], p[1] + eta * g[1], p[2] + eta * g[2]])
                .collect();
            rms_normalize(&mut cand)?;
            let (a, g) = activation_and_grad(&params, &cand)?;
            if !a.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite activation during ascent of layer {layer} channel {out_channel} at step {steps}"
                )));
            }
            if a >= act {
                accepted = Some((cand, a, g));
                break;
            }
            eta *= 0.5;
        }
        steps += 1;
        match accepted {
            Some((p, a, g)) => {
                points = p;
                act = a;
                grad = g;
            }
            // no ascent direction at any tried scale: a local maximum
            None => break,
        }
    }
    Ok(AscentResult {
        fragment: fragment(kernel, &params, points)?,
        initial_activation: initial,
        steps_taken: steps,
        flat,
    })
}

/// Output of one filter slid over a cycle, after the layers before it.
pub fn apply_kernel_trace(model: &Model, layer: usize, out_channel: usize, cycle: &GaitCycle) -> Result<Vec<TracePoint>> {
    qconv_config(model, layer)?;
    let params = kernel_params(model, layer, out_channel)?;
    let input = model.activations_before(&model.encode(&[cycle])?, layer)?;
    let (y, _) = qconv_forward(&input, &params)?;
    Ok(y.data()
        .chunks_exact(4)
        .enumerate()
        .map(|(position, q)| {
            let q = Quaternion::from_slice(q);
            TracePoint {
                position,
                real: q.w,
                vector: [q.x, q.y, q.z],
                magnitude: q.norm(),
            }
        })
        .collect())
}

impl VizDocument {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}
