//! Elementary differentiable primitives and the [`Tape`] shorthands that
//! record them.

use super::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::quaternion::Quaternion;
use crate::tensor::{check_same_shape, Tensor};

fn quat_last_axis(op: &str, t: &Tensor) -> Result<()> {
    if t.shape().last() != Some(&4) {
        return Err(Error::contract(format!(
            "{op}: expected trailing quaternion axis of length 4, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len() - 1].to_vec()
}

macro_rules! binary_elementwise {
    ($name:ident, $label:literal, $fwd:expr, $bwd:expr) => {
        pub struct $name;

        impl Function for $name {
            fn name(&self) -> &'static str {
                $label
            }

            fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
                check_same_shape($label, inputs[0], inputs[1])?;
                Ok(inputs[0].zip_map(inputs[1], $fwd))
            }

            fn backward(
                &self,
                inputs: &[&Tensor],
                _output: &Tensor,
                g: &Tensor,
                _needs: &[bool],
            ) -> Result<Vec<Option<Tensor>>> {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                let mut ga = Tensor::zeros(inputs[0].shape());
                let mut gb = Tensor::zeros(inputs[1].shape());
                for i in 0..a.len() {
                    let (da, db): (f64, f64) = $bwd(a[i], b[i], g.data()[i]);
                    ga.data_mut()[i] = da;
                    gb.data_mut()[i] = db;
                }
                Ok(vec![Some(ga), Some(gb)])
            }
        }
    };
}

binary_elementwise!(Add, "add", |a, b| a + b, |_a: f64, _b: f64, g: f64| (g, g));
binary_elementwise!(Sub, "sub", |a, b| a - b, |_a: f64, _b: f64, g: f64| (g, -g));
binary_elementwise!(Mul, "mul", |a, b| a * b, |a: f64, b: f64, g: f64| (g * b, g * a));
binary_elementwise!(Div, "div", |a, b| a / b, |a: f64, b: f64, g: f64| (
    g / b,
    -g * a / (b * b)
));

/// Multiplication by a fixed real constant.
pub struct Scale(pub f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * self.0))
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.map(|v| v * self.0))])
    }
}

/// Addition of a fixed real constant to every element.
pub struct AddScalar(pub f64);

impl Function for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v + self.0))
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone())])
    }
}

/// `s * x` where `s` is a single-element tensor broadcast over `x`.
pub struct BroadcastMul;

impl Function for BroadcastMul {
    fn name(&self) -> &'static str {
        "broadcast_mul"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if !inputs[0].is_scalar() {
            return Err(Error::contract("broadcast_mul: first input must be a scalar"));
        }
        let s = inputs[0].item();
        Ok(inputs[1].map(|v| v * s))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0].item();
        let gs: f64 = g.data().iter().zip(inputs[1].data()).map(|(a, b)| a * b).sum();
        Ok(vec![
            Some(Tensor::filled(inputs[0].shape(), gs)),
            Some(g.map(|v| v * s)),
        ])
    }
}

pub struct Sum;

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].data().iter().sum()))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::filled(inputs[0].shape(), g.item()))])
    }
}

pub struct Square;

impl Function for Square {
    fn name(&self) -> &'static str {
        "square"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * v))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(inputs[0].zip_map(g, |x, g| 2.0 * x * g))])
    }
}

pub struct Sqrt;

impl Function for Sqrt {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs[0].data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        Ok(inputs[0].map(f64::sqrt))
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(out.zip_map(g, |y, g| g / (2.0 * y)))])
    }
}

pub struct Relu;

impl Function for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v.max(0.0)))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(inputs[0].zip_map(g, |x, g| if x > 0.0 { g } else { 0.0 }))])
    }
}

/// Hamilton product of matching quaternion tensors, quaternion by quaternion.
pub struct Hamilton;

impl Function for Hamilton {
    fn name(&self) -> &'static str {
        "hamilton"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        check_same_shape("hamilton", inputs[0], inputs[1])?;
        quat_last_axis("hamilton", inputs[0])?;
        let mut out = Tensor::zeros(inputs[0].shape());
        for ((o, p), q) in out
            .data_mut()
            .chunks_exact_mut(4)
            .zip(inputs[0].data().chunks_exact(4))
            .zip(inputs[1].data().chunks_exact(4))
        {
            (Quaternion::from_slice(p) * Quaternion::from_slice(q)).write_to(o);
        }
        Ok(out)
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut gp = Tensor::zeros(inputs[0].shape());
        let mut gq = Tensor::zeros(inputs[1].shape());
        let iter = inputs[0]
            .data()
            .chunks_exact(4)
            .zip(inputs[1].data().chunks_exact(4))
            .zip(g.data().chunks_exact(4))
            .zip(gp.data_mut().chunks_exact_mut(4).zip(gq.data_mut().chunks_exact_mut(4)));
        for (((p, q), g), (op, oq)) in iter {
            let (p, q, g) = (
                Quaternion::from_slice(p),
                Quaternion::from_slice(q),
                Quaternion::from_slice(g),
            );
            (g * q.conjugate()).write_to(op);
            (p.conjugate() * g).write_to(oq);
        }
        Ok(vec![Some(gp), Some(gq)])
    }
}

/// Quaternion inverse; its adjoint is `g ↦ -conj(q⁻¹)·g·conj(q⁻¹)`, the
/// transpose of `dq ↦ -q⁻¹·dq·q⁻¹`.
pub struct QuatInverse;

impl Function for QuatInverse {
    fn name(&self) -> &'static str {
        "quat_inverse"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        quat_last_axis("quat_inverse", inputs[0])?;
        let mut out = Tensor::zeros(inputs[0].shape());
        for (o, q) in out.data_mut().chunks_exact_mut(4).zip(inputs[0].data().chunks_exact(4)) {
            Quaternion::from_slice(q).inverse()?.write_to(o);
        }
        Ok(out)
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut gq = Tensor::zeros(out.shape());
        for ((o, y), g) in gq
            .data_mut()
            .chunks_exact_mut(4)
            .zip(out.data().chunks_exact(4))
            .zip(g.data().chunks_exact(4))
        {
            let yc = Quaternion::from_slice(y).conjugate();
            (-(yc * Quaternion::from_slice(g) * yc)).write_to(o);
        }
        Ok(vec![Some(gq)])
    }
}

/// `|q|` over the trailing quaternion axis, which is removed. The gradient
/// at `q = 0` is taken to be zero.
pub struct Magnitude;

impl Function for Magnitude {
    fn name(&self) -> &'static str {
        "magnitude"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        quat_last_axis("magnitude", inputs[0])?;
        let data = inputs[0]
            .data()
            .chunks_exact(4)
            .map(|q| Quaternion::from_slice(q).norm())
            .collect();
        Tensor::new(drop_last(inputs[0].shape()), data)
    }
    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        for (((o, q), &n), &g) in gx
            .data_mut()
            .chunks_exact_mut(4)
            .zip(inputs[0].data().chunks_exact(4))
            .zip(out.data())
            .zip(g.data())
        {
            if n > 0.0 {
                for k in 0..4 {
                    o[k] = g * q[k] / n;
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Scalar part `(q + q*)/2` over the trailing quaternion axis.
pub struct RealPart;

impl Function for RealPart {
    fn name(&self) -> &'static str {
        "real_part"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        quat_last_axis("real_part", inputs[0])?;
        let data = inputs[0].data().chunks_exact(4).map(|q| q[0]).collect();
        Tensor::new(drop_last(inputs[0].shape()), data)
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        for (o, &g) in gx.data_mut().chunks_exact_mut(4).zip(g.data()) {
            o[0] = g;
        }
        Ok(vec![Some(gx)])
    }
}

/// Matrix `[m, n]` times vector `[n]`.
pub struct MatVec;

impl Function for MatVec {
    fn name(&self) -> &'static str {
        "matvec"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, x) = (inputs[0], inputs[1]);
        let &[m, n] = a.shape() else {
            return Err(Error::contract(format!("matvec: matrix shape {:?}", a.shape())));
        };
        if x.shape() != [n] {
            return Err(Error::contract(format!(
                "matvec: vector shape {:?} does not match {n} columns",
                x.shape()
            )));
        }
        let data = a
            .data()
            .chunks_exact(n)
            .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum())
            .collect();
        Tensor::new(vec![m], data)
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, x) = (inputs[0], inputs[1]);
        let n = x.len();
        let mut ga = Tensor::zeros(a.shape());
        let mut gx = Tensor::zeros(x.shape());
        for (i, &gi) in g.data().iter().enumerate() {
            let row = &a.data()[i * n..(i + 1) * n];
            for j in 0..n {
                ga.data_mut()[i * n + j] = gi * x.data()[j];
                gx.data_mut()[j] += gi * row[j];
            }
        }
        Ok(vec![Some(ga), Some(gx)])
    }
}

/// Affine map on a batch: `x [B, F]` with packed parameters
/// `[W (U×F, row-major) | bias (U)]` gives `[B, U]`.
pub struct Linear {
    pub in_features: usize,
    pub units: usize,
}

impl Function for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, p) = (inputs[0], inputs[1]);
        let (f, u) = (self.in_features, self.units);
        let &[b, xf] = x.shape() else {
            return Err(Error::contract(format!("linear: input shape {:?}", x.shape())));
        };
        if xf != f || p.len() != u * f + u {
            return Err(Error::contract(format!(
                "linear: input features {xf} / params {} do not match {f}→{u}",
                p.len()
            )));
        }
        let (w, bias) = p.data().split_at(u * f);
        let mut out = vec![0.0; b * u];
        for (xrow, orow) in x.data().chunks_exact(f).zip(out.chunks_exact_mut(u)) {
            for (k, o) in orow.iter_mut().enumerate() {
                let wrow = &w[k * f..(k + 1) * f];
                *o = bias[k] + wrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Tensor::new(vec![b, u], out)
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, p) = (inputs[0], inputs[1]);
        let (f, u) = (self.in_features, self.units);
        let w = &p.data()[..u * f];
        let mut gp = Tensor::zeros(p.shape());
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        {
            let (gw, gb) = gp.data_mut().split_at_mut(u * f);
            for (bi, (xrow, grow)) in x.data().chunks_exact(f).zip(g.data().chunks_exact(u)).enumerate() {
                for (k, &gk) in grow.iter().enumerate() {
                    if gk == 0.0 {
                        continue;
                    }
                    gb[k] += gk;
                    let gwrow = &mut gw[k * f..(k + 1) * f];
                    for (gwj, &xj) in gwrow.iter_mut().zip(xrow) {
                        *gwj += gk * xj;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxrow = &mut gx.data_mut()[bi * f..(bi + 1) * f];
                        for (gxj, &wj) in gxrow.iter_mut().zip(&w[k * f..(k + 1) * f]) {
                            *gxj += gk * wj;
                        }
                    }
                }
            }
        }
        Ok(vec![gx, Some(gp)])
    }
}

/// Log-softmax over the last axis, using max-subtraction for stability.
pub struct LogSoftmax;

impl Function for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let k = *x
            .shape()
            .last()
            .ok_or_else(|| Error::contract("log_softmax: scalar input"))?;
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(out)
    }
    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let k = *out.shape().last().unwrap();
        let mut gx = g.clone();
        for (grow, orow) in gx.data_mut().chunks_exact_mut(k).zip(out.data().chunks_exact(k)) {
            let gs: f64 = grow.iter().sum();
            for (gv, &lp) in grow.iter_mut().zip(orow) {
                *gv -= lp.exp() * gs;
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Mean negative log-likelihood of `labels` given log-probabilities `[B, K]`.
pub struct NllLoss {
    pub labels: Vec<usize>,
}

impl Function for NllLoss {
    fn name(&self) -> &'static str {
        "nll_loss"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let &[b, k] = x.shape() else {
            return Err(Error::contract(format!("nll_loss: input shape {:?}", x.shape())));
        };
        if b != self.labels.len() || b == 0 {
            return Err(Error::contract(format!(
                "nll_loss: {b} rows but {} labels",
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("nll_loss: label {bad} ≥ {k} classes")));
        }
        let total: f64 = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -x.data()[i * k + l])
            .sum();
        Ok(Tensor::scalar(total / b as f64))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let k = x.shape()[1];
        let b = self.labels.len() as f64;
        let mut gx = Tensor::zeros(x.shape());
        for (i, &l) in self.labels.iter().enumerate() {
            gx.data_mut()[i * k + l] = -g.item() / b;
        }
        Ok(vec![Some(gx)])
    }
}

pub struct Reshape(pub Vec<usize>);

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].clone().reshaped(self.0.clone())
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.clone().reshaped(inputs[0].shape().to_vec())?)])
    }
}

/// Contiguous range `[start, start + len)` of a flat tensor.
pub struct Slice {
    pub start: usize,
    pub len: usize,
}

impl Function for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.start + self.len > x.len() {
            return Err(Error::contract(format!(
                "slice: range {}..{} exceeds length {}",
                self.start,
                self.start + self.len,
                x.len()
            )));
        }
        Ok(Tensor::from_vec(x.data()[self.start..self.start + self.len].to_vec()))
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        gx.data_mut()[self.start..self.start + self.len].copy_from_slice(g.data());
        Ok(vec![Some(gx)])
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(AddScalar(s), &[a])
    }
    pub fn broadcast_mul(&mut self, s: Var, a: Var) -> Result<Var> {
        self.record(BroadcastMul, &[s, a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Sum, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Square, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Sqrt, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Relu, &[a])
    }
    pub fn hamilton(&mut self, p: Var, q: Var) -> Result<Var> {
        self.record(Hamilton, &[p, q])
    }
    pub fn quat_inverse(&mut self, q: Var) -> Result<Var> {
        self.record(QuatInverse, &[q])
    }
    pub fn magnitude(&mut self, q: Var) -> Result<Var> {
        self.record(Magnitude, &[q])
    }
    pub fn real_part(&mut self, q: Var) -> Result<Var> {
        self.record(RealPart, &[q])
    }
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        self.record(MatVec, &[a, x])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.record(LogSoftmax, &[a])
    }
    pub fn nll_loss(&mut self, log_probs: Var, labels: Vec<usize>) -> Result<Var> {
        self.record(NllLoss { labels }, &[log_probs])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.record(Reshape(shape), &[a])
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Slice { start, len }, &[a])
    }

    /// Softmax cross-entropy, averaged over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lp = self.log_softmax(logits)?;
        self.nll_loss(lp, labels)
    }
}
