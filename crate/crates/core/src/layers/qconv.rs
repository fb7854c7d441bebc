//! Rotation-equivariant quaternion convolution.
//!
//! For a window `q_0 … q_{L-1}` with pivot `p = q_l`, `l = (L-1)/2`, one
//! (out, in) filter slice computes
//!
//! ```text
//! f = Σ_i a_i · (q_i + b_i) · R_i · q_i · R_i⁻¹,   R_i = p + c_i
//! ```
//!
//! with real `a_i, b_i, c_i` added to scalar parts. Every factor is a
//! quaternion plus a real number, so conjugating all inputs by a unit `r`
//! conjugates `f` by `r`. [`InverseForm::Literal`] replaces the trailing
//! `R_i⁻¹` by `(q_i + c_i)⁻¹`, which is also equivariant.

use serde::{Deserialize, Serialize};

use crate::autodiff::Function;
use crate::error::{Error, Result};
use crate::quaternion::Quaternion;
use crate::tensor::Tensor;

/// Below this magnitude the rotation factor of a tap is replaced by the
/// identity rotation.
pub const ROTATION_GUARD: f64 = 1e-6;

/// Which quaternion is inverted at the end of each filter term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseForm {
    /// `(p + c_i) q_i (p + c_i)⁻¹`: a true rotation of `q_i`.
    #[default]
    Pivot,
    /// `(p + c_i) q_i (q_i + c_i)⁻¹`.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub taps: usize,
    pub stride: usize,
    pub padding: usize,
    pub form: InverseForm,
}

impl QConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, taps: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            taps,
            stride: 1,
            padding: 0,
            form: InverseForm::Pivot,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_form(mut self, form: InverseForm) -> Self {
        self.form = form;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps % 2 == 0 {
            return Err(Error::config(format!(
                "qconv needs an odd tap count so a pivot exists, got {}",
                self.taps
            )));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("qconv stride and channel counts must be positive"));
        }
        Ok(())
    }

    pub fn pivot(&self) -> usize {
        (self.taps - 1) / 2
    }

    /// Number of real parameters: `3 · L · C_in · C_out`.
    pub fn param_count(&self) -> usize {
        3 * self.slice_len()
    }

    fn slice_len(&self) -> usize {
        self.taps * self.in_channels * self.out_channels
    }

    pub fn output_len(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.taps {
            return Err(Error::contract(format!(
                "qconv: input length {n} with padding {} is shorter than {} taps",
                self.padding, self.taps
            )));
        }
        Ok((padded - self.taps) / self.stride + 1)
    }
}

/// Filter weights `a`, real-part biases `b` and rotation offsets `c`, each
/// laid out `[C_out][C_in][L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QConvParams {
    pub config: QConvConfig,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl QConvParams {
    pub fn zeros(config: QConvConfig) -> Result<Self> {
        config.validate()?;
        let n = config.slice_len();
        Ok(Self {
            config,
            a: vec![0.0; n],
            b: vec![0.0; n],
            c: vec![0.0; n],
        })
    }

    /// Parameters from the packed `[a | b | c]` layout used in flat vectors.
    pub fn from_packed(config: QConvConfig, packed: &[f64]) -> Result<Self> {
        config.validate()?;
        let n = config.slice_len();
        if packed.len() != 3 * n {
            return Err(Error::contract(format!(
                "qconv: expected {} packed parameters, got {}",
                3 * n,
                packed.len()
            )));
        }
        Ok(Self {
            config,
            a: packed[..n].to_vec(),
            b: packed[n..2 * n].to_vec(),
            c: packed[2 * n..].to_vec(),
        })
    }

    pub fn packed(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.b);
        v.extend_from_slice(&self.c);
        v
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len()
    }

    pub fn index(&self, out: usize, inp: usize, tap: usize) -> usize {
        (out * self.config.in_channels + inp) * self.config.taps + tap
    }

    /// `(a, b, c)` for one (out, in) filter slice.
    pub fn slice(&self, out: usize, inp: usize) -> (&[f64], &[f64], &[f64]) {
        let start = self.index(out, inp, 0);
        let end = start + self.config.taps;
        (&self.a[start..end], &self.b[start..end], &self.c[start..end])
    }
}

/// One filter term `a (q + b) R q S⁻¹`. Returns the term and whether the
/// rotation guard fired.
///
/// At the pivot tap `R = S = p + c` commutes with `q = p`, so the rotation is
/// the identity for every `c`; it is evaluated as such.
#[inline]
fn filter_term(q: Quaternion, pivot: Quaternion, a: f64, b: f64, c: f64, form: InverseForm, at_pivot: bool) -> (Quaternion, bool) {
    let u = q.add_real(b);
    let rot = pivot.add_real(c);
    let (v, degenerate) = match form {
        _ if at_pivot => (q, rot.norm_sqr() < ROTATION_GUARD * ROTATION_GUARD),
        InverseForm::Pivot => {
            let n2 = rot.norm_sqr();
            if n2 < ROTATION_GUARD * ROTATION_GUARD {
                (q, true)
            } else {
                (rot * q * rot.conjugate().scale(1.0 / n2), false)
            }
        }
        InverseForm::Literal => {
            let s = q.add_real(c);
            let n2 = s.norm_sqr();
            if n2 < ROTATION_GUARD * ROTATION_GUARD {
                (q, true)
            } else {
                (rot * q * s.conjugate().scale(1.0 / n2), false)
            }
        }
    };
    ((u * v).scale(a), degenerate)
}

/// Output of one filter slice on a window of `L` quaternions. The second
/// value counts taps whose rotation factor fell under [`ROTATION_GUARD`].
pub fn qconv_window(window: &[Quaternion], a: &[f64], b: &[f64], c: &[f64], form: InverseForm) -> Result<(Quaternion, usize)> {
    let taps = window.len();
    if taps % 2 == 0 || a.len() != taps || b.len() != taps || c.len() != taps {
        return Err(Error::contract(format!(
            "qconv_window: window of {taps} (must be odd) with {}/{}/{} parameters",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    let pivot = window[(taps - 1) / 2];
    let mut acc = Quaternion::ZERO;
    let mut degenerate = 0;
    for i in 0..taps {
        let (t, d) = filter_term(window[i], pivot, a[i], b[i], c[i], form, i == (taps - 1) / 2);
        acc += t;
        degenerate += usize::from(d);
    }
    Ok((acc, degenerate))
}

fn check_input(config: &QConvConfig, x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [m, ch, n, 4] if ch == config.in_channels => Ok((m, n)),
        _ => Err(Error::contract(format!(
            "qconv: expected input [batch, {}, length, 4], got {:?}",
            config.in_channels,
            x.shape()
        ))),
    }
}

#[inline]
fn load(x: &[f64], base: usize, pos: isize, n: usize) -> Option<Quaternion> {
    (pos >= 0 && (pos as usize) < n).then(|| Quaternion::from_slice(&x[(base + pos as usize) * 4..]))
}

/// Batched forward pass over `x: [batch, C_in, n, 4]`, returning
/// `[batch, C_out, n', 4]` and the number of guarded taps. Padding
/// positions hold the zero quaternion.
pub fn qconv_forward(x: &Tensor, params: &QConvParams) -> Result<(Tensor, usize)> {
    qconv_forward_packed(&params.config, x, &params.packed())
}

fn qconv_forward_packed(cfg: &QConvConfig, x: &Tensor, packed: &[f64]) -> Result<(Tensor, usize)> {
    cfg.validate()?;
    let (m, n) = check_input(cfg, x)?;
    let n_out = cfg.output_len(n)?;
    let slice = cfg.slice_len();
    if packed.len() != 3 * slice {
        return Err(Error::contract(format!(
            "qconv: expected {} parameters, got {}",
            3 * slice,
            packed.len()
        )));
    }
    let (pa, rest) = packed.split_at(slice);
    let (pb, pc) = rest.split_at(slice);
    let (cin, cout, taps) = (cfg.in_channels, cfg.out_channels, cfg.taps);
    let l = cfg.pivot() as isize;
    let xd = x.data();
    let mut out = Tensor::zeros(&[m, cout, n_out, 4]);
    let od = out.data_mut();
    let mut degenerate = 0;

    for s in 0..m {
        for o in 0..cout {
            for t in 0..n_out {
                let start = (t * cfg.stride) as isize - cfg.padding as isize;
                let mut acc = Quaternion::ZERO;
                for c in 0..cin {
                    let base = (s * cin + c) * n;
                    let pivot = load(xd, base, start + l, n).unwrap_or(Quaternion::ZERO);
                    let pbase = (o * cin + c) * taps;
                    for i in 0..taps {
                        let Some(q) = load(xd, base, start + i as isize, n) else {
                            continue;
                        };
                        let k = pbase + i;
                        let (term, d) = filter_term(q, pivot, pa[k], pb[k], pc[k], cfg.form, i as isize == l);
                        acc += term;
                        degenerate += usize::from(d);
                    }
                }
                acc.write_to(&mut od[((s * cout + o) * n_out + t) * 4..]);
            }
        }
    }
    Ok((out, degenerate))
}

/// Tape primitive for a quaternion convolution. Inputs are the activations
/// `[batch, C_in, n, 4]` and the packed `[a | b | c]` parameter vector.
pub struct QConvOp {
    pub config: QConvConfig,
}

impl Function for QConvOp {
    fn name(&self) -> &'static str {
        "qconv"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        qconv_forward_packed(&self.config, inputs[0], inputs[1].data()).map(|(t, _)| t)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let cfg = &self.config;
        let (x, packed) = (inputs[0], inputs[1].data());
        let (m, n) = check_input(cfg, x)?;
        let n_out = cfg.output_len(n)?;
        let slice = cfg.slice_len();
        let (pa, rest) = packed.split_at(slice);
        let (pb, pc) = rest.split_at(slice);
        let (cin, cout, taps) = (cfg.in_channels, cfg.out_channels, cfg.taps);
        let l = cfg.pivot() as isize;
        let xd = x.data();
        let gd = grad.data();

        let want_x = needs[0];
        let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
        let mut gp = vec![0.0; 3 * slice];

        for s in 0..m {
            for o in 0..cout {
                for t in 0..n_out {
                    let g = Quaternion::from_slice(&gd[((s * cout + o) * n_out + t) * 4..]);
                    if g == Quaternion::ZERO {
                        continue;
                    }
                    let start = (t * cfg.stride) as isize - cfg.padding as isize;
                    for c in 0..cin {
                        let base = (s * cin + c) * n;
                        let piv_pos = start + l;
                        let pivot = load(xd, base, piv_pos, n).unwrap_or(Quaternion::ZERO);
                        let mut g_pivot = Quaternion::ZERO;
                        let pbase = (o * cin + c) * taps;
                        for i in 0..taps {
                            let pos = start + i as isize;
                            let Some(q) = load(xd, base, pos, n) else {
                                continue;
                            };
                            let k = pbase + i;
                            let (a, b, cc) = (pa[k], pb[k], pc[k]);
                            let u = q.add_real(b);
                            let rot = pivot.add_real(cc);
                            let mut g_q = Quaternion::ZERO;

                            // v = rot · q · inv, inv = rotation-factor inverse (or identity).
                            let (v, inv) = match cfg.form {
                                _ if i as isize == l => (q, None),
                                InverseForm::Pivot => {
                                    let n2 = rot.norm_sqr();
                                    if n2 < ROTATION_GUARD * ROTATION_GUARD {
                                        (q, None)
                                    } else {
                                        let inv = rot.conjugate().scale(1.0 / n2);
                                        (rot * q * inv, Some(inv))
                                    }
                                }
                                InverseForm::Literal => {
                                    let sq = q.add_real(cc);
                                    let n2 = sq.norm_sqr();
                                    if n2 < ROTATION_GUARD * ROTATION_GUARD {
                                        (q, None)
                                    } else {
                                        let inv = sq.conjugate().scale(1.0 / n2);
                                        (rot * q * inv, Some(inv))
                                    }
                                }
                            };

                            gp[k] += g.dot(u * v);
                            let g_u = (g * v.conjugate()).scale(a);
                            gp[slice + k] += g_u.w;
                            g_q += g_u;
                            let g_v = (u.conjugate() * g).scale(a);

                            match inv {
                                None => g_q += g_v,
                                Some(inv) => {
                                    let inv_c = inv.conjugate();
                                    g_q += rot.conjugate() * g_v * inv_c;
                                    let g_rot = g_v * (q * inv).conjugate();
                                    let g_inv = (rot * q).conjugate() * g_v;
                                    // adjoint of d(s⁻¹) = -s⁻¹ ds s⁻¹
                                    let g_s = -(inv_c * g_inv * inv_c);
                                    match cfg.form {
                                        InverseForm::Pivot => {
                                            let g_r = g_rot + g_s;
                                            gp[2 * slice + k] += g_r.w;
                                            g_pivot += g_r;
                                        }
                                        InverseForm::Literal => {
                                            gp[2 * slice + k] += g_rot.w + g_s.w;
                                            g_pivot += g_rot;
                                            g_q += g_s;
                                        }
                                    }
                                }
                            }

                            if let Some(gx) = gx.as_mut() {
                                let off = (base + pos as usize) * 4;
                                let dst = &mut gx.data_mut()[off..off + 4];
                                dst[0] += g_q.w;
                                dst[1] += g_q.x;
                                dst[2] += g_q.y;
                                dst[3] += g_q.z;
                            }
                        }
                        if let (Some(gx), true) = (gx.as_mut(), piv_pos >= 0 && (piv_pos as usize) < n) {
                            let off = (base + piv_pos as usize) * 4;
                            let dst = &mut gx.data_mut()[off..off + 4];
                            dst[0] += g_pivot.w;
                            dst[1] += g_pivot.x;
                            dst[2] += g_pivot.y;
                            dst[3] += g_pivot.z;
                        }
                    }
                }
            }
        }
        Ok(vec![gx, Some(Tensor::from_vec(gp))])
    }
}
