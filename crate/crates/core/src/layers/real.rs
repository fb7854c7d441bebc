//! Real-valued layers for the classifier head and the baseline CNN.

use crate::autodiff::ops::Linear;
use crate::autodiff::Function;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub taps: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dConfig {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.taps
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn output_len(&self, n: usize) -> Result<usize> {
        if self.stride == 0 || self.taps == 0 {
            return Err(Error::config("conv1d stride and taps must be positive"));
        }
        let padded = n + 2 * self.padding;
        if padded < self.taps {
            return Err(Error::contract(format!(
                "conv1d: input length {n} with padding {} is shorter than {} taps",
                self.padding, self.taps
            )));
        }
        Ok((padded - self.taps) / self.stride + 1)
    }
}

/// Cross-correlation over `x: [batch, C_in, n]` with packed parameters
/// `[W (C_out×C_in×L) | bias (C_out)]`, zero padded.
pub struct Conv1dOp {
    pub config: Conv1dConfig,
}

impl Conv1dOp {
    fn dims(&self, inputs: &[&Tensor]) -> Result<(usize, usize, usize)> {
        let cfg = &self.config;
        let (m, n) = match *inputs[0].shape() {
            [m, c, n] if c == cfg.in_channels => (m, n),
            _ => {
                return Err(Error::contract(format!(
                    "conv1d: expected [batch, {}, length], got {:?}",
                    cfg.in_channels,
                    inputs[0].shape()
                )))
            }
        };
        if inputs[1].len() != cfg.param_count() {
            return Err(Error::contract(format!(
                "conv1d: expected {} parameters, got {}",
                cfg.param_count(),
                inputs[1].len()
            )));
        }
        Ok((m, n, cfg.output_len(n)?))
    }
}

impl Function for Conv1dOp {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (m, n, n_out) = self.dims(inputs)?;
        let cfg = &self.config;
        let (w, bias) = inputs[1].data().split_at(cfg.weight_len());
        let x = inputs[0].data();
        let mut out = vec![0.0; m * cfg.out_channels * n_out];
        for s in 0..m {
            for o in 0..cfg.out_channels {
                let orow = &mut out[(s * cfg.out_channels + o) * n_out..][..n_out];
                orow.fill(bias[o]);
                for c in 0..cfg.in_channels {
                    let xrow = &x[(s * cfg.in_channels + c) * n..][..n];
                    let wrow = &w[(o * cfg.in_channels + c) * cfg.taps..][..cfg.taps];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let start = (t * cfg.stride) as isize - cfg.padding as isize;
                        for (i, &wi) in wrow.iter().enumerate() {
                            let pos = start + i as isize;
                            if pos >= 0 && (pos as usize) < n {
                                *ov += wi * xrow[pos as usize];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![m, cfg.out_channels, n_out], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (m, n, n_out) = self.dims(inputs)?;
        let cfg = &self.config;
        let w = &inputs[1].data()[..cfg.weight_len()];
        let x = inputs[0].data();
        let gd = g.data();
        let mut gp = vec![0.0; cfg.param_count()];
        let mut gx = needs[0].then(|| vec![0.0; x.len()]);
        for s in 0..m {
            for o in 0..cfg.out_channels {
                let grow = &gd[(s * cfg.out_channels + o) * n_out..][..n_out];
                gp[cfg.weight_len() + o] += grow.iter().sum::<f64>();
                for c in 0..cfg.in_channels {
                    let xoff = (s * cfg.in_channels + c) * n;
                    let woff = (o * cfg.in_channels + c) * cfg.taps;
                    for (t, &gt) in grow.iter().enumerate() {
                        if gt == 0.0 {
                            continue;
                        }
                        let start = (t * cfg.stride) as isize - cfg.padding as isize;
                        for i in 0..cfg.taps {
                            let pos = start + i as isize;
                            if pos >= 0 && (pos as usize) < n {
                                let p = pos as usize;
                                gp[woff + i] += gt * x[xoff + p];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xoff + p] += gt * w[woff + i];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gx = gx.map(|d| Tensor::new(inputs[0].shape().to_vec(), d)).transpose()?;
        Ok(vec![gx, Some(Tensor::from_vec(gp))])
    }
}

/// Plain (tape-free) helpers mirroring the layer primitives.
pub fn conv1d_forward(x: &Tensor, config: Conv1dConfig, params: &[f64]) -> Result<Tensor> {
    Conv1dOp { config }.forward(&[x, &Tensor::from_vec(params.to_vec())])
}

pub fn dense_forward(x: &Tensor, in_features: usize, units: usize, params: &[f64]) -> Result<Tensor> {
    Linear { in_features, units }.forward(&[x, &Tensor::from_vec(params.to_vec())])
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Mean softmax cross-entropy of `logits: [batch, classes]`.
pub fn log_softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = crate::autodiff::Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, labels.to_vec())?;
    Ok(tape.value(loss).item())
}
