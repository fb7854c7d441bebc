//! Python bindings: quaternions, synthetic data, models and the
//! equivariance check.
//!
//! Cycles cross the boundary as `(label, [[x, y, z], ...])` tuples.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use qcnn_core::data::{self, rotate_cycle, GaitCycle, GaitDataset, Manifest, Split, SynthConfig};
use qcnn_core::layers::{equivariance_suite, Model};
use qcnn_core::quaternion::{random_unit_quaternion, rotate_vector, Quaternion, Vector3};
use qcnn_core::training::{evaluate, rng_for, stream, Checkpoint, ModelRef};
use qcnn_core::Error;

pub type Cycle = (u32, Vec<[f64; 3]>);

fn py_err(e: Error) -> PyErr {
    if e.is_user_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_cycles(cycles: Vec<Cycle>) -> Vec<GaitCycle> {
    cycles.into_iter().map(|(label, samples)| GaitCycle { samples, label }).collect()
}

fn from_cycles(cycles: Vec<GaitCycle>) -> Vec<Cycle> {
    cycles.into_iter().map(|c| (c.label, c.samples)).collect()
}

#[pyclass(name = "Quaternion", module = "qcnn", frozen)]
#[derive(Clone, Copy)]
pub struct PyQuaternion {
    inner: Quaternion,
}

#[pymethods]
impl PyQuaternion {
    #[new]
    fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self {
            inner: Quaternion::new(w, x, y, z),
        }
    }

    #[staticmethod]
    fn from_axis_angle(axis: [f64; 3], angle: f64) -> PyResult<Self> {
        let inner = Quaternion::from_axis_angle(Vector3::new(axis[0], axis[1], axis[2]), angle).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// A uniformly distributed unit quaternion.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn random_unit(seed: u64) -> Self {
        Self {
            inner: random_unit_quaternion(&mut rng_for(seed, stream::ROTATE)),
        }
    }

    #[getter]
    fn w(&self) -> f64 {
        self.inner.w
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.inner.y
    }

    #[getter]
    fn z(&self) -> f64 {
        self.inner.z
    }

    fn __mul__(&self, other: &Self) -> Self {
        Self {
            inner: self.inner * other.inner,
        }
    }

    fn __add__(&self, other: &Self) -> Self {
        Self {
            inner: self.inner + other.inner,
        }
    }

    fn __sub__(&self, other: &Self) -> Self {
        Self {
            inner: self.inner - other.inner,
        }
    }

    fn conjugate(&self) -> Self {
        Self {
            inner: self.inner.conjugate(),
        }
    }

    fn inverse(&self) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.inverse().map_err(py_err)?,
        })
    }

    fn norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Rotates a 3-vector by this (unit) quaternion: `q v q⁻¹`.
    fn rotate(&self, v: [f64; 3]) -> PyResult<[f64; 3]> {
        Ok(rotate_vector(self.inner, Vector3::new(v[0], v[1], v[2])).map_err(py_err)?.to_array())
    }

    fn to_tuple(&self) -> (f64, f64, f64, f64) {
        let [w, x, y, z] = self.inner.to_array();
        (w, x, y, z)
    }

    fn __repr__(&self) -> String {
        let q = self.inner;
        format!("Quaternion({}, {}, {}, {})", q.w, q.x, q.y, q.z)
    }
}

#[pyclass(name = "Model", module = "qcnn")]
pub struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized preset (`default-qcnn`, `default-cnn`,
    /// `compact-qcnn`, `compact-cnn`).
    #[staticmethod]
    #[pyo3(signature = (name, num_classes, seed = 0))]
    fn preset(name: &str, num_classes: usize, seed: u64) -> PyResult<Self> {
        let spec = ModelRef::Preset(name.into()).resolve(num_classes).map_err(py_err)?;
        let inner = Model::new(spec, &mut rng_for(seed, stream::INIT)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.spec()).map_err(|e| py_err(e.into()))
    }

    /// Eval-mode logits, one row per cycle.
    fn logits(&self, cycles: Vec<Vec<[f64; 3]>>) -> PyResult<Vec<Vec<f64>>> {
        logits(&self.inner, cycles).map_err(py_err)
    }

    /// Largest logit change under random rotations of all inputs, relative
    /// to the largest unrotated logit.
    #[pyo3(signature = (cycles, trials = 10, seed = 0))]
    fn rotation_invariance_error(&self, cycles: Vec<Vec<[f64; 3]>>, trials: usize, seed: u64) -> PyResult<f64> {
        rotation_invariance_error(&self.inner, cycles, trials, seed).map_err(py_err)
    }

    /// `(top1, top5)` on labelled cycles.
    fn evaluate(&self, cycles: Vec<Cycle>) -> PyResult<(f64, f64)> {
        let ds = GaitDataset::new(to_cycles(cycles), self.inner.num_classes(), Split::Test).map_err(py_err)?;
        let r = evaluate(&self.inner, &ds).map_err(py_err)?;
        Ok((r.top1, r.top5))
    }
}

pub fn logits(model: &Model, cycles: Vec<Vec<[f64; 3]>>) -> qcnn_core::Result<Vec<Vec<f64>>> {
    let cycles: Vec<GaitCycle> = cycles.into_iter().map(|samples| GaitCycle { samples, label: 0 }).collect();
    let refs: Vec<&GaitCycle> = cycles.iter().collect();
    let out = model.logits(&model.encode(&refs)?)?;
    Ok(out.data().chunks(model.num_classes()).map(<[f64]>::to_vec).collect())
}

pub fn rotation_invariance_error(model: &Model, cycles: Vec<Vec<[f64; 3]>>, trials: usize, seed: u64) -> qcnn_core::Result<f64> {
    let cycles: Vec<GaitCycle> = cycles.into_iter().map(|samples| GaitCycle { samples, label: 0 }).collect();
    let refs: Vec<&GaitCycle> = cycles.iter().collect();
    let base = model.logits(&model.encode(&refs)?)?;
    let scale = base.data().iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    let mut rng = rng_for(seed, stream::ROTATE);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let r = random_unit_quaternion(&mut rng);
        let rotated = cycles.iter().map(|c| rotate_cycle(c, r)).collect::<qcnn_core::Result<Vec<_>>>()?;
        let refs: Vec<&GaitCycle> = rotated.iter().collect();
        worst = worst.max(model.logits(&model.encode(&refs)?)?.max_abs_diff(&base) / scale);
    }
    Ok(worst)
}

/// Synthetic labelled cycles, identical to `qcnn gen-data` with the same
/// arguments.
#[pyfunction]
#[pyo3(signature = (num_classes = 10, cycles_per_class = 120, noise_sigma = 0.05, seed = 0))]
fn generate_dataset(num_classes: usize, cycles_per_class: usize, noise_sigma: f64, seed: u64) -> PyResult<Vec<Cycle>> {
    let cfg = SynthConfig {
        num_classes,
        cycles_per_class,
        noise_sigma,
        ..SynthConfig::default()
    };
    let ds = data::generate_synthetic_dataset(&cfg, &mut rng_for(seed, stream::DATA)).map_err(py_err)?;
    Ok(from_cycles(ds.cycles))
}

#[pyfunction]
fn save_dataset(path: PathBuf, cycles: Vec<Cycle>, num_classes: usize) -> PyResult<()> {
    let ds = GaitDataset::new(to_cycles(cycles), num_classes, Split::Train).map_err(py_err)?;
    let manifest = Manifest {
        seed: None,
        noise_sigma: None,
        split: Split::Train,
    };
    data::save_dataset(&ds, &path, &manifest).map_err(py_err)
}

/// `(num_classes, cycles)`.
#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<(usize, Vec<Cycle>)> {
    let ds = data::load_dataset(&path).map_err(py_err)?;
    Ok((ds.num_classes, from_cycles(ds.cycles)))
}

/// Max deviation of the quaternion convolution from exact rotation
/// equivariance over random shapes, parameters, inputs and rotations.
#[pyfunction]
#[pyo3(signature = (trials = 100, seed = 0))]
fn check_equivariance(trials: usize, seed: u64) -> PyResult<f64> {
    let mut rng = rng_for(seed, stream::ROTATE);
    Ok(equivariance_suite(trials, &mut rng).map_err(py_err)?.max_deviation)
}

#[pymodule]
fn qcnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuaternion>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(check_equivariance, m)?)?;
    Ok(())
}
