//! Declarative layer stacks and the networks built from them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::batchnorm::{channel_rms, updated_mu, Mode, QBatchNormOp, DEFAULT_MOMENTUM};
use super::init::{init_qconv, init_real_layer};
use super::qconv::{InverseForm, QConvConfig, QConvOp, QConvParams};
use super::real::{Conv1dConfig, Conv1dOp};
use crate::autodiff::ops::Linear;
use crate::autodiff::{Tape, Var};
use crate::data::{encode_quaternion_batch, encode_real_batch, GaitCycle, CYCLE_LENGTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn one() -> usize {
    1
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Qconv {
        in_channels: usize,
        out_channels: usize,
        taps: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        inverse_form: InverseForm,
    },
    Qbatchnorm {
        channels: usize,
        #[serde(default = "default_momentum")]
        epsilon: f64,
    },
    ReadoutMagnitude,
    ReadoutReal,
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        taps: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    /// Flattens a `[channels, length]` input before the affine map.
    Dense { in_features: usize, units: usize },
    Relu,
}

impl LayerSpec {
    pub fn qconv(in_channels: usize, out_channels: usize, taps: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Qconv {
            in_channels,
            out_channels,
            taps,
            stride,
            padding,
            inverse_form: InverseForm::Pivot,
        }
    }

    pub fn conv1d(in_channels: usize, out_channels: usize, taps: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv1d {
            in_channels,
            out_channels,
            taps,
            stride,
            padding,
        }
    }

    pub fn qbatchnorm(channels: usize) -> Self {
        LayerSpec::Qbatchnorm {
            channels,
            epsilon: DEFAULT_MOMENTUM,
        }
    }

    pub fn dense(in_features: usize, units: usize) -> Self {
        LayerSpec::Dense { in_features, units }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Qconv { .. } => "qconv",
            LayerSpec::Qbatchnorm { .. } => "qbatchnorm",
            LayerSpec::ReadoutMagnitude => "readout-magnitude",
            LayerSpec::ReadoutReal => "readout-real",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
        }
    }

    fn qconv_config(&self) -> Option<QConvConfig> {
        match *self {
            LayerSpec::Qconv {
                in_channels,
                out_channels,
                taps,
                stride,
                padding,
                inverse_form,
            } => Some(QConvConfig {
                in_channels,
                out_channels,
                taps,
                stride,
                padding,
                form: inverse_form,
            }),
            _ => None,
        }
    }

    fn conv1d_config(&self) -> Option<Conv1dConfig> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                taps,
                stride,
                padding,
            } => Some(Conv1dConfig {
                in_channels,
                out_channels,
                taps,
                stride,
                padding,
            }),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Qconv { .. } => self.qconv_config().unwrap().param_count(),
            LayerSpec::Conv1d { .. } => self.conv1d_config().unwrap().param_count(),
            LayerSpec::Dense { in_features, units } => in_features * units + units,
            _ => 0,
        }
    }
}

/// How gait cycles are presented to the first layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// One channel of pure quaternions.
    Quaternion,
    /// Three real channels (x, y, z).
    Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputEncoding,
    pub input_length: usize,
    pub layers: Vec<LayerSpec>,
}

/// Activation shape between layers, excluding the batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Quaternion { channels: usize, length: usize },
    Real { channels: usize, length: usize },
    Flat { features: usize },
}

impl ModelSpec {
    /// Four quaternion convolutions, a magnitude readout and two dense layers.
    pub fn default_qcnn(num_classes: usize) -> Self {
        Self {
            input: InputEncoding::Quaternion,
            input_length: CYCLE_LENGTH,
            layers: vec![
                LayerSpec::qconv(1, 8, 7, 1, 3),
                LayerSpec::qbatchnorm(8),
                LayerSpec::qconv(8, 16, 7, 1, 3),
                LayerSpec::qbatchnorm(16),
                LayerSpec::qconv(16, 16, 5, 2, 2),
                LayerSpec::qconv(16, 16, 5, 2, 2),
                LayerSpec::ReadoutMagnitude,
                LayerSpec::dense(16 * 25, 64),
                LayerSpec::Relu,
                LayerSpec::dense(64, num_classes),
            ],
        }
    }

    /// Real-valued mirror of [`ModelSpec::default_qcnn`] with ReLUs between
    /// the convolutions.
    pub fn default_cnn(num_classes: usize) -> Self {
        Self {
            input: InputEncoding::Real,
            input_length: CYCLE_LENGTH,
            layers: vec![
                LayerSpec::conv1d(3, 16, 7, 1, 3),
                LayerSpec::Relu,
                LayerSpec::conv1d(16, 16, 7, 1, 3),
                LayerSpec::Relu,
                LayerSpec::conv1d(16, 16, 5, 2, 2),
                LayerSpec::Relu,
                LayerSpec::conv1d(16, 16, 5, 2, 2),
                LayerSpec::Relu,
                LayerSpec::dense(16 * 25, 64),
                LayerSpec::Relu,
                LayerSpec::dense(64, num_classes),
            ],
        }
    }

    /// Narrower variant of [`ModelSpec::default_qcnn`] for quick runs.
    pub fn compact_qcnn(num_classes: usize) -> Self {
        Self {
            input: InputEncoding::Quaternion,
            input_length: CYCLE_LENGTH,
            layers: vec![
                LayerSpec::qconv(1, 4, 7, 1, 3),
                LayerSpec::qbatchnorm(4),
                LayerSpec::qconv(4, 8, 7, 1, 3),
                LayerSpec::qbatchnorm(8),
                LayerSpec::qconv(8, 8, 5, 2, 2),
                LayerSpec::qconv(8, 8, 5, 2, 2),
                LayerSpec::ReadoutMagnitude,
                LayerSpec::dense(8 * 25, 64),
                LayerSpec::Relu,
                LayerSpec::dense(64, num_classes),
            ],
        }
    }

    pub fn compact_cnn(num_classes: usize) -> Self {
        Self {
            input: InputEncoding::Real,
            input_length: CYCLE_LENGTH,
            layers: vec![
                LayerSpec::conv1d(3, 8, 7, 1, 3),
                LayerSpec::Relu,
                LayerSpec::conv1d(8, 16, 7, 1, 3),
                LayerSpec::Relu,
                LayerSpec::conv1d(16, 16, 5, 2, 2),
                LayerSpec::Relu,
                LayerSpec::conv1d(16, 8, 5, 2, 2),
                LayerSpec::Relu,
                LayerSpec::dense(8 * 25, 64),
                LayerSpec::Relu,
                LayerSpec::dense(64, num_classes),
            ],
        }
    }

    /// Two quaternion convolutions on 12-sample inputs, for gradient checks.
    pub fn small_qcnn(num_classes: usize) -> Self {
        Self {
            input: InputEncoding::Quaternion,
            input_length: 12,
            layers: vec![
                LayerSpec::qconv(1, 4, 5, 1, 2),
                LayerSpec::qbatchnorm(4),
                LayerSpec::qconv(4, 4, 3, 2, 1),
                LayerSpec::ReadoutMagnitude,
                LayerSpec::dense(24, num_classes),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Output classes, i.e. the units of the final dense layer.
    pub fn num_classes(&self) -> Result<usize> {
        match self.shapes()?.last() {
            Some(Stream::Flat { features }) => Ok(*features),
            _ => unreachable!("shapes() guarantees a flat output"),
        }
    }

    /// Validates the stack and returns the activation shape after each layer
    /// (the first entry is the input).
    pub fn shapes(&self) -> Result<Vec<Stream>> {
        let mut cur = match self.input {
            InputEncoding::Quaternion => Stream::Quaternion {
                channels: 1,
                length: self.input_length,
            },
            InputEncoding::Real => Stream::Real {
                channels: 3,
                length: self.input_length,
            },
        };
        let mut out = vec![cur];
        let mut readouts = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::config(format!("layer {i} ({}): {msg}", layer.kind()));
            cur = match (layer, cur) {
                (LayerSpec::Qconv { .. }, Stream::Quaternion { channels, length }) => {
                    let cfg = layer.qconv_config().unwrap();
                    cfg.validate().map_err(|e| err(e.to_string()))?;
                    if cfg.in_channels != channels {
                        return Err(err(format!("expects {} input channels, receives {channels}", cfg.in_channels)));
                    }
                    let length = cfg.output_len(length).map_err(|e| err(e.to_string()))?;
                    Stream::Quaternion {
                        channels: cfg.out_channels,
                        length,
                    }
                }
                (LayerSpec::Qbatchnorm { channels: want, epsilon }, Stream::Quaternion { channels, length }) => {
                    if *want != channels {
                        return Err(err(format!("expects {want} channels, receives {channels}")));
                    }
                    if !(*epsilon > 0.0 && *epsilon <= 1.0) {
                        return Err(err(format!("momentum {epsilon} not in (0, 1]")));
                    }
                    Stream::Quaternion { channels, length }
                }
                (LayerSpec::ReadoutMagnitude | LayerSpec::ReadoutReal, Stream::Quaternion { channels, length }) => {
                    readouts += 1;
                    Stream::Real { channels, length }
                }
                (LayerSpec::Relu, Stream::Quaternion { .. }) => {
                    return Err(err(
                        "elementwise nonlinearity between quaternion layers breaks rotation equivariance".into(),
                    ))
                }
                (LayerSpec::Qconv { .. } | LayerSpec::Qbatchnorm { .. }, _) => {
                    return Err(err("quaternion layer after the readout or on real input".into()))
                }
                (LayerSpec::ReadoutMagnitude | LayerSpec::ReadoutReal, _) => {
                    return Err(err("readout needs quaternion input; only one readout is allowed".into()))
                }
                (LayerSpec::Conv1d { .. }, Stream::Real { channels, length }) => {
                    let cfg = layer.conv1d_config().unwrap();
                    if cfg.in_channels != channels {
                        return Err(err(format!("expects {} input channels, receives {channels}", cfg.in_channels)));
                    }
                    let length = cfg.output_len(length).map_err(|e| err(e.to_string()))?;
                    Stream::Real {
                        channels: cfg.out_channels,
                        length,
                    }
                }
                (LayerSpec::Conv1d { .. }, _) => return Err(err(format!("needs [channels, length] real input, got {cur:?}"))),
                (LayerSpec::Dense { in_features, units }, Stream::Real { channels, length }) if channels * length == *in_features => {
                    Stream::Flat { features: *units }
                }
                (LayerSpec::Dense { in_features, units }, Stream::Flat { features }) if features == *in_features => {
                    Stream::Flat { features: *units }
                }
                (LayerSpec::Dense { in_features, .. }, _) => {
                    return Err(err(format!("expects {in_features} input features, receives {cur:?}")))
                }
                (LayerSpec::Relu, s) => s,
            };
            out.push(cur);
        }
        if self.input == InputEncoding::Quaternion && readouts != 1 {
            return Err(Error::config("quaternion layers must be followed by exactly one readout"));
        }
        if !matches!(cur, Stream::Flat { .. }) || !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::config("the network must end in a dense layer producing class logits"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Plan {
    offset: usize,
    len: usize,
    bn_slot: Option<usize>,
    input: Stream,
}

/// Result of one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Batch-norm running estimates after this pass. Equal to the model's
    /// stored state in eval mode.
    pub bn_mu: Vec<Vec<f64>>,
}

/// A network: its spec plus a flat parameter vector and batch-norm state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    plans: Vec<Plan>,
    params: Vec<f64>,
    bn_mu: Vec<Vec<f64>>,
    num_classes: usize,
}

fn plan(spec: &ModelSpec) -> Result<(Vec<Plan>, Vec<usize>, usize)> {
    let shapes = spec.shapes()?;
    let mut plans = Vec::with_capacity(spec.layers.len());
    let mut bn_channels = Vec::new();
    let mut offset = 0;
    for (layer, &input) in spec.layers.iter().zip(&shapes) {
        let len = layer.param_count();
        let bn_slot = match layer {
            LayerSpec::Qbatchnorm { channels, .. } => {
                bn_channels.push(*channels);
                Some(bn_channels.len() - 1)
            }
            _ => None,
        };
        plans.push(Plan {
            offset,
            len,
            bn_slot,
            input,
        });
        offset += len;
    }
    Ok((plans, bn_channels, offset))
}

/// Validates the model spec and initializes all parameters from `rng`; batch-norm
/// estimates start at 1.
pub fn build_network<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model> {
    Model::new(spec.clone(), rng)
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let (plans, bn_channels, total) = plan(&spec)?;
        let mut params = vec![0.0; total];
        for (layer, p) in spec.layers.iter().zip(&plans) {
            let slot = &mut params[p.offset..p.offset + p.len];
            match layer {
                LayerSpec::Qconv { .. } => {
                    let mut qp = QConvParams::zeros(layer.qconv_config().unwrap())?;
                    init_qconv(&mut qp, rng);
                    slot.copy_from_slice(&qp.packed());
                }
                LayerSpec::Conv1d { .. } => {
                    let cfg = layer.conv1d_config().unwrap();
                    init_real_layer(slot, cfg.weight_len(), cfg.in_channels * cfg.taps, rng);
                }
                LayerSpec::Dense { in_features, units } => {
                    init_real_layer(slot, in_features * units, *in_features, rng);
                }
                _ => {}
            }
        }
        let num_classes = spec.num_classes()?;
        Ok(Self {
            spec,
            plans,
            params,
            bn_mu: bn_channels.iter().map(|&c| vec![1.0; c]).collect(),
            num_classes,
        })
    }

    /// Reassembles a model from stored state, checking every size.
    pub fn from_parts(spec: ModelSpec, params: Vec<f64>, bn_mu: Vec<Vec<f64>>) -> Result<Self> {
        let (plans, bn_channels, total) = plan(&spec)?;
        if params.len() != total {
            return Err(Error::contract(format!("spec needs {total} parameters, got {}", params.len())));
        }
        let sizes: Vec<usize> = bn_mu.iter().map(Vec::len).collect();
        if sizes != bn_channels {
            return Err(Error::contract(format!(
                "batch-norm state sizes {sizes:?} do not match spec {bn_channels:?}"
            )));
        }
        if bn_mu.iter().flatten().any(|&m| !(m > 0.0)) {
            return Err(Error::contract("batch-norm estimates must be positive"));
        }
        let num_classes = spec.num_classes()?;
        Ok(Self {
            spec,
            plans,
            params,
            bn_mu,
            num_classes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract("parameter vector length changed"));
        }
        self.params = params;
        Ok(())
    }

    pub fn bn_state(&self) -> &[Vec<f64>] {
        &self.bn_mu
    }

    pub fn set_bn_state(&mut self, bn_mu: Vec<Vec<f64>>) -> Result<()> {
        if bn_mu.len() != self.bn_mu.len() || bn_mu.iter().zip(&self.bn_mu).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::contract("batch-norm state shape changed"));
        }
        self.bn_mu = bn_mu;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Range of the flat parameter vector owned by `layer`.
    pub fn layer_param_range(&self, layer: usize) -> std::ops::Range<usize> {
        let p = &self.plans[layer];
        p.offset..p.offset + p.len
    }

    pub fn qconv_params(&self, layer: usize) -> Result<QConvParams> {
        let cfg = self
            .spec
            .layers
            .get(layer)
            .and_then(LayerSpec::qconv_config)
            .ok_or_else(|| Error::config(format!("layer {layer} is not a qconv layer")))?;
        QConvParams::from_packed(cfg, &self.params[self.layer_param_range(layer)])
    }

    /// Mutable view of one layer's packed parameters.
    pub fn layer_params_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.layer_param_range(layer);
        &mut self.params[r]
    }

    /// Batches cycles into the tensor layout of the input layer.
    pub fn encode(&self, cycles: &[&GaitCycle]) -> Result<Tensor> {
        if let Some(c) = cycles.iter().find(|c| c.len() != self.spec.input_length) {
            return Err(Error::contract(format!(
                "model expects cycles of length {}, got {}",
                self.spec.input_length,
                c.len()
            )));
        }
        match self.spec.input {
            InputEncoding::Quaternion => encode_quaternion_batch(cycles),
            InputEncoding::Real => encode_real_batch(cycles),
        }
    }

    /// Runs the first `stop` layers. `params` must hold the flat parameter
    /// vector; in train mode batch-norm layers normalize with the freshly
    /// updated estimates, which are returned alongside.
    pub fn forward_prefix(&self, tape: &mut Tape, params: Var, input: Var, mode: Mode, stop: usize) -> Result<(Var, Vec<Vec<f64>>)> {
        let mut x = input;
        let mut bn = self.bn_mu.clone();
        let batch = tape.value(input).shape()[0];
        for (layer, plan) in self.spec.layers.iter().zip(&self.plans).take(stop) {
            x = match layer {
                LayerSpec::Qconv { .. } => {
                    let p = tape.slice(params, plan.offset, plan.len)?;
                    tape.record(
                        QConvOp {
                            config: layer.qconv_config().unwrap(),
                        },
                        &[x, p],
                    )?
                }
                LayerSpec::Qbatchnorm { epsilon, .. } => {
                    let slot = plan.bn_slot.unwrap();
                    match mode {
                        Mode::Train => {
                            let rms = channel_rms(tape.value(x))?;
                            bn[slot] = updated_mu(&bn[slot], &rms, *epsilon);
                            tape.record(QBatchNormOp::train(bn[slot].clone(), rms, *epsilon), &[x])?
                        }
                        Mode::Eval => tape.record(QBatchNormOp::eval(bn[slot].clone()), &[x])?,
                    }
                }
                LayerSpec::ReadoutMagnitude => tape.magnitude(x)?,
                LayerSpec::ReadoutReal => tape.real_part(x)?,
                LayerSpec::Conv1d { .. } => {
                    let p = tape.slice(params, plan.offset, plan.len)?;
                    tape.record(
                        Conv1dOp {
                            config: layer.conv1d_config().unwrap(),
                        },
                        &[x, p],
                    )?
                }
                LayerSpec::Dense { in_features, units } => {
                    if let Stream::Real { .. } = plan.input {
                        x = tape.reshape(x, vec![batch, *in_features])?;
                    }
                    let p = tape.slice(params, plan.offset, plan.len)?;
                    tape.record(
                        Linear {
                            in_features: *in_features,
                            units: *units,
                        },
                        &[x, p],
                    )?
                }
                LayerSpec::Relu => tape.relu(x)?,
            };
        }
        Ok((x, bn))
    }

    pub fn forward(&self, tape: &mut Tape, params: Var, input: Var, mode: Mode) -> Result<Forward> {
        let (logits, bn_mu) = self.forward_prefix(tape, params, input, mode, self.spec.layers.len())?;
        Ok(Forward { logits, bn_mu })
    }

    /// Eval-mode logits `[batch, classes]` without recording gradients.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(self.params.clone()));
        let x = tape.constant(input.clone());
        let f = self.forward(&mut tape, p, x, Mode::Eval)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Eval-mode activations entering `layer`.
    pub fn activations_before(&self, input: &Tensor, layer: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(self.params.clone()));
        let x = tape.constant(input.clone());
        let (y, _) = self.forward_prefix(&mut tape, p, x, Mode::Eval, layer)?;
        Ok(tape.value(y).clone())
    }
}
