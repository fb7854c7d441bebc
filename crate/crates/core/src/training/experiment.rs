//! Original/rotated train-test grid and the device-flip experiment.

use std::fmt::Write as _;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{evaluate, init_model, rng_for, split_train_val, stream, train_model, ModelRef, TrainConfig, TrainOutcome};
use crate::data::{generate_synthetic_dataset, GaitDataset, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::quaternion::{Quaternion, Vector3};

fn default_test_fraction() -> f64 {
    1.0 / 6.0
}

fn preset(name: &str) -> TrainConfig {
    TrainConfig {
        model: ModelRef::Preset(name.into()),
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds data generation, splits, rotations and both trainings.
    pub seed: u64,
    pub data: SynthConfig,
    pub test_fraction: f64,
    pub qcnn: TrainConfig,
    pub cnn: TrainConfig,
    /// Run the training jobs on separate threads.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig::default(),
            test_fraction: default_test_fraction(),
            qcnn: preset("default-qcnn"),
            cnn: preset("default-cnn"),
            parallel: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "Original/Original")]
    OriginalOriginal,
    #[serde(rename = "Original/Rotated")]
    OriginalRotated,
    #[serde(rename = "Rotated/Rotated")]
    RotatedRotated,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::OriginalOriginal, Regime::OriginalRotated, Regime::RotatedRotated];

    pub fn label(self) -> &'static str {
        match self {
            Regime::OriginalOriginal => "Original/Original",
            Regime::OriginalRotated => "Original/Rotated",
            Regime::RotatedRotated => "Rotated/Rotated",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub regime: Regime,
    pub qcnn_top1: f64,
    pub qcnn_top5: f64,
    pub cnn_top1: f64,
    pub cnn_top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub qcnn_params: usize,
    pub cnn_params: usize,
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    pub fn row(&self, regime: Regime) -> &MatrixRow {
        self.rows.iter().find(|r| r.regime == regime).expect("every regime is reported")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,qcnn_top1,qcnn_top5,cnn_top1,cnn_top5\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.regime.label(), r.qcnn_top1, r.qcnn_top5, r.cnn_top1, r.cnn_top5);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20}{:>10}{:>10}{:>10}{:>10}", "Train/Test", "QCNN@1", "QCNN@5", "CNN@1", "CNN@5");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20}{:>9.2}%{:>9.2}%{:>9.2}%{:>9.2}%",
                r.regime.label(),
                100.0 * r.qcnn_top1,
                100.0 * r.qcnn_top5,
                100.0 * r.cnn_top1,
                100.0 * r.cnn_top5
            );
        }
        let _ = writeln!(out, "parameters: QCNN {}, CNN {}", self.qcnn_params, self.cnn_params);
        out
    }
}

fn job_config(base: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..base.clone() }
}

fn train_job(pool: &GaitDataset, config: &TrainConfig) -> Result<Model> {
    let (tr, val) = split_train_val(pool, config);
    let model = init_model(config, pool.num_classes)?;
    let TrainOutcome { best, .. } = train_model(model, &tr, &val, config)?;
    best.to_model()
}

/// Runs `jobs` either sequentially or one thread per job, returning results
/// in input order.
fn run_jobs<'a>(parallel: bool, jobs: Vec<(&'a GaitDataset, TrainConfig)>) -> Result<Vec<Model>> {
    if !parallel {
        return jobs.iter().map(|(d, c)| train_job(d, c)).collect();
    }
    thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|(d, c)| s.spawn(move || train_job(d, c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Domain("training thread panicked".into()))?)
            .collect()
    })
}

fn generate_pool_and_test(seed: u64, data: &SynthConfig, test_fraction: f64) -> Result<(GaitDataset, GaitDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    let ds = generate_synthetic_dataset(data, &mut rng_for(seed, stream::DATA))?;
    Ok(ds.split_off(test_fraction, &mut rng_for(seed, stream::SPLIT), Split::Train, Split::Test))
}

/// Trains a QCNN and a baseline CNN on original and on randomly rotated
/// cycles and tests each on original/rotated held-out cycles.
///
/// Original/Original and Original/Rotated share one trained model per
/// architecture: retraining with the same seed would reproduce it exactly.
pub fn run_experiment_matrix(config: &ExperimentConfig) -> Result<MatrixReport> {
    let (pool, test) = generate_pool_and_test(config.seed, &config.data, config.test_fraction)?;
    let mut rot_rng = rng_for(config.seed, stream::ROTATE);
    let pool_rot = pool.randomly_rotated(&mut rot_rng);
    let test_rot = test.randomly_rotated(&mut rot_rng);

    let q = job_config(&config.qcnn, config.seed);
    let c = job_config(&config.cnn, config.seed);
    let models = run_jobs(
        config.parallel,
        vec![(&pool, q.clone()), (&pool_rot, q), (&pool, c.clone()), (&pool_rot, c)],
    )?;
    let [q_orig, q_rot, c_orig, c_rot] = <[Model; 4]>::try_from(models).expect("four jobs");

    let mut rows = Vec::with_capacity(3);
    for regime in Regime::ALL {
        let (qm, cm, set) = match regime {
            Regime::OriginalOriginal => (&q_orig, &c_orig, &test),
            Regime::OriginalRotated => (&q_orig, &c_orig, &test_rot),
            Regime::RotatedRotated => (&q_rot, &c_rot, &test_rot),
        };
        let (qr, cr) = (evaluate(qm, set)?, evaluate(cm, set)?);
        rows.push(MatrixRow {
            regime,
            qcnn_top1: qr.top1,
            qcnn_top5: qr.top5,
            cnn_top1: cr.top1,
            cnn_top5: cr.top5,
        });
    }
    Ok(MatrixReport {
        qcnn_params: q_orig.param_count(),
        cnn_params: c_orig.param_count(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlipConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub test_fraction: f64,
    /// Rotation axis of the 180° flip.
    pub axis: [f64; 3],
    pub qcnn: TrainConfig,
    pub cnn: TrainConfig,
    pub parallel: bool,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthConfig {
                num_classes: 8,
                ..SynthConfig::default()
            },
            test_fraction: default_test_fraction(),
            axis: [1.0, 0.0, 0.0],
            qcnn: preset("default-qcnn"),
            cnn: preset("default-cnn"),
            parallel: true,
        }
    }
}

/// Rotation by π about `axis`: the pure unit quaternion along it, built
/// directly so that flipping twice is exactly the identity on axis-aligned
/// flips.
pub fn flip_rotation(axis: [f64; 3]) -> Result<Quaternion> {
    let v = Vector3::from(axis);
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::config(format!("flip axis {axis:?} must be a non-zero finite vector")));
    }
    Ok(Quaternion::new(0.0, v.x / n, v.y / n, v.z / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipRow {
    pub model: String,
    pub test: f64,
    pub test_flipped: f64,
    pub train_flipped: f64,
    pub val_flipped: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub axis: [f64; 3],
    pub rows: Vec<FlipRow>,
}

impl FlipReport {
    pub fn row(&self, model: &str) -> &FlipRow {
        self.rows.iter().find(|r| r.model == model).expect("model is reported")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,test,test_flipped,train_flipped,val_flipped\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.model, r.test, r.test_flipped, r.train_flipped, r.val_flipped);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "flip: 180° about {:?}", self.axis);
        let _ = writeln!(out, "{:<8}{:>10}{:>14}{:>15}{:>13}", "model", "test", "test-flipped", "train-flipped", "val-flipped");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8}{:>9.2}%{:>13.2}%{:>14.2}%{:>12.2}%",
                r.model,
                100.0 * r.test,
                100.0 * r.test_flipped,
                100.0 * r.train_flipped,
                100.0 * r.val_flipped
            );
        }
        out
    }
}

/// Trains both models on canonically oriented cycles and reports top-1 on
/// the held-out cycles and on flipped copies of every split.
pub fn flip_experiment(config: &FlipConfig) -> Result<FlipReport> {
    let flip = flip_rotation(config.axis)?;
    let (pool, test) = generate_pool_and_test(config.seed, &config.data, config.test_fraction)?;
    let q = job_config(&config.qcnn, config.seed);
    let c = job_config(&config.cnn, config.seed);
    let models = run_jobs(config.parallel, vec![(&pool, q.clone()), (&pool, c.clone())])?;

    let mut rows = Vec::with_capacity(2);
    for ((name, cfg), model) in [("QCNN", &q), ("CNN", &c)].into_iter().zip(&models) {
        let (tr, val) = split_train_val(&pool, cfg);
        let top1 = |d: &GaitDataset| evaluate(model, d).map(|r| r.top1);
        rows.push(FlipRow {
            model: name.into(),
            test: top1(&test)?,
            test_flipped: top1(&test.rotated_by(flip)?)?,
            train_flipped: top1(&tr.rotated_by(flip)?)?,
            val_flipped: top1(&val.rotated_by(flip)?)?,
        });
    }
    Ok(FlipReport { axis: config.axis, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rotate_cycle;

    #[test]
    fn flip_is_an_exact_involution_on_axes() {
        let mut rng = rng_for(1, 0);
        let ds = generate_synthetic_dataset(
            &SynthConfig {
                num_classes: 2,
                cycles_per_class: 2,
                ..SynthConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        for axis in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]] {
            let f = flip_rotation(axis).unwrap();
            for c in &ds.cycles {
                let once = rotate_cycle(c, f).unwrap();
                assert_ne!(once, *c);
                assert_eq!(rotate_cycle(&once, f).unwrap(), *c);
            }
        }
        assert!(flip_rotation([0.0; 3]).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let f: FlipConfig = serde_json::from_str(r#"{"axis": [0, 1, 0]}"#).unwrap();
        assert_eq!(f.axis, [0.0, 1.0, 0.0]);
        assert_eq!(f.data.num_classes, 8);
    }

    #[test]
    fn report_tables() {
        let r = MatrixReport {
            qcnn_params: 10,
            cnn_params: 12,
            rows: Regime::ALL
                .iter()
                .map(|&regime| MatrixRow {
                    regime,
                    qcnn_top1: 0.5,
                    qcnn_top5: 1.0,
                    cnn_top1: 0.25,
                    cnn_top5: 0.75,
                })
                .collect(),
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("regime,qcnn_top1,qcnn_top5,cnn_top1,cnn_top5\nOriginal/Original,0.5,1,0.25,0.75\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(r.to_text().contains("Rotated/Rotated"));
    }
}
