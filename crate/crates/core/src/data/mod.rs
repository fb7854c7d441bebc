//! Gait cycles: resampling, rotation, batching and storage.

mod io;
mod synth;

pub use io::{decode_dataset, encode_dataset, load_dataset, manifest_path, read_manifest, save_dataset, write_manifest, Manifest};
pub use synth::{generate_synthetic_dataset, signature_distance, SynthConfig};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quaternion::{random_unit_quaternion, rotate_vector, Quaternion, Vector3};
use crate::tensor::Tensor;

/// Samples per cycle after preprocessing.
pub const CYCLE_LENGTH: usize = 100;

/// One gait cycle: `T` acceleration vectors in time order plus a class id.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitCycle {
    pub samples: Vec<[f64; 3]>,
    pub label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaitDataset {
    pub cycles: Vec<GaitCycle>,
    pub num_classes: usize,
    pub split: Split,
}

impl GaitCycle {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl GaitDataset {
    pub fn new(cycles: Vec<GaitCycle>, num_classes: usize, split: Split) -> Result<Self> {
        let ds = Self {
            cycles,
            num_classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    pub fn cycle_length(&self) -> Option<usize> {
        self.cycles.first().map(GaitCycle::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.cycle_length();
        for (i, c) in self.cycles.iter().enumerate() {
            if c.label as usize >= self.num_classes {
                return Err(Error::contract(format!(
                    "cycle {i}: label {} ≥ {} classes",
                    c.label, self.num_classes
                )));
            }
            if Some(c.len()) != t {
                return Err(Error::contract(format!("cycle {i}: length {} differs from {t:?}", c.len())));
            }
            if c.samples.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("cycle {i}: non-finite sample")));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.cycles.iter().map(|c| c.label as usize).collect()
    }

    fn with_cycles(&self, cycles: Vec<GaitCycle>, split: Split) -> Self {
        Self {
            cycles,
            num_classes: self.num_classes,
            split,
        }
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Self {
        self.with_cycles(indices.iter().map(|&i| self.cycles[i].clone()).collect(), split)
    }

    /// Deterministic shuffle, then the first `ceil(len·fraction)` cycles go
    /// to the second returned set.
    pub fn split_off<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R, first: Split, second: Split) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        let k = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let (b, a) = idx.split_at(k);
        (self.subset(a, first), self.subset(b, second))
    }

    /// Every cycle rotated by its own random rotation, drawn in cycle order.
    pub fn randomly_rotated<R: Rng + ?Sized>(&self, rng: &mut R) -> Self {
        let cycles = self
            .cycles
            .iter()
            .map(|c| {
                let r = random_unit_quaternion(rng);
                rotate_cycle(c, r).expect("sampled rotation is unit")
            })
            .collect();
        self.with_cycles(cycles, self.split)
    }

    /// All cycles rotated by the same unit quaternion.
    pub fn rotated_by(&self, r: Quaternion) -> Result<Self> {
        let cycles = self.cycles.iter().map(|c| rotate_cycle(c, r)).collect::<Result<_>>()?;
        Ok(self.with_cycles(cycles, self.split))
    }
}

/// Linear interpolation of `raw` onto `target` uniformly spaced points over
/// `[0, T_raw - 1]`; endpoints are reproduced exactly.
pub fn resample_cycle(raw: &[[f64; 3]], target: usize) -> Result<Vec<[f64; 3]>> {
    if raw.len() < 2 {
        return Err(Error::contract(format!("resample: need at least 2 samples, got {}", raw.len())));
    }
    if target < 2 {
        return Err(Error::contract(format!("resample: target length {target} < 2")));
    }
    let last = raw.len() - 1;
    let step = last as f64 / (target - 1) as f64;
    Ok((0..target)
        .map(|k| {
            if k == target - 1 {
                return raw[last];
            }
            let pos = k as f64 * step;
            let i = (pos.floor() as usize).min(last - 1);
            let frac = pos - i as f64;
            if frac == 0.0 {
                return raw[i];
            }
            let (a, b) = (raw[i], raw[i + 1]);
            [0, 1, 2].map(|d| a[d] + frac * (b[d] - a[d]))
        })
        .collect())
}

/// Rotates every sample by the unit quaternion `r`; the label is kept.
pub fn rotate_cycle(cycle: &GaitCycle, r: Quaternion) -> Result<GaitCycle> {
    if (r.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("rotate_cycle: |r| = {} is not 1", r.norm())));
    }
    let samples = cycle
        .samples
        .iter()
        .map(|&s| rotate_vector(r, Vector3::from(s)).map(Vector3::to_array))
        .collect::<Result<_>>()?;
    Ok(GaitCycle {
        samples,
        label: cycle.label,
    })
}

fn uniform_length(cycles: &[&GaitCycle]) -> Result<usize> {
    let t = cycles.first().map(|c| c.len()).unwrap_or(0);
    if cycles.iter().any(|c| c.len() != t) {
        return Err(Error::contract("batch mixes cycle lengths"));
    }
    Ok(t)
}

/// `[batch, 1, T, 4]` pure quaternions.
pub fn encode_quaternion_batch(cycles: &[&GaitCycle]) -> Result<Tensor> {
    let t = uniform_length(cycles)?;
    let mut data = Vec::with_capacity(cycles.len() * t * 4);
    for c in cycles {
        for s in &c.samples {
            data.extend([0.0, s[0], s[1], s[2]]);
        }
    }
    Tensor::new(vec![cycles.len(), 1, t, 4], data)
}

/// `[batch, 3, T]`: the x, y and z components as three real channels.
pub fn encode_real_batch(cycles: &[&GaitCycle]) -> Result<Tensor> {
    let t = uniform_length(cycles)?;
    let mut data = Vec::with_capacity(cycles.len() * t * 3);
    for c in cycles {
        for d in 0..3 {
            data.extend(c.samples.iter().map(|s| s[d]));
        }
    }
    Tensor::new(vec![cycles.len(), 3, t], data)
}
