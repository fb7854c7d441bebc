//! Optimization loop, evaluation, checkpoints and the experiment runners.

mod checkpoint;
mod eval;
mod experiment;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
pub use eval::{evaluate, report_from_logits, top_k_hit, EvalReport};
pub use experiment::{
    flip_experiment, flip_rotation, run_experiment_matrix, ExperimentConfig, FlipConfig, FlipReport, FlipRow, MatrixReport, MatrixRow,
    Regime,
};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{GaitCycle, GaitDataset, Split};
use crate::error::{Error, Result};
use crate::layers::{Mode, Model, ModelSpec};
use crate::tensor::Tensor;

/// Independent random streams derived from one seed.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const DATA: u64 = 5;
    pub const ROTATE: u64 = 6;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Every training cycle gets a fresh random rotation each epoch.
    Rotate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    #[serde(rename = "top1-val")]
    Top1Val,
}

/// A preset name or an inline layer stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Spec(ModelSpec),
}

impl ModelRef {
    pub const PRESETS: [&'static str; 4] = ["default-qcnn", "default-cnn", "compact-qcnn", "compact-cnn"];

    pub fn resolve(&self, num_classes: usize) -> Result<ModelSpec> {
        match self {
            ModelRef::Spec(s) => {
                s.shapes()?;
                Ok(s.clone())
            }
            ModelRef::Preset(name) => match name.as_str() {
                "default-qcnn" => Ok(ModelSpec::default_qcnn(num_classes)),
                "default-cnn" => Ok(ModelSpec::default_cnn(num_classes)),
                "compact-qcnn" => Ok(ModelSpec::compact_qcnn(num_classes)),
                "compact-cnn" => Ok(ModelSpec::compact_cnn(num_classes)),
                other => Err(Error::config(format!(
                    "unknown model preset {other:?}; expected one of {:?}",
                    Self::PRESETS
                ))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub model: ModelRef,
    pub selection: SelectionMetric,
    /// Share of the training pool held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 10.0,
            seed: 0,
            augmentation: Augmentation::None,
            model: ModelRef::Preset("default-qcnn".into()),
            selection: SelectionMetric::Top1Val,
            val_fraction: 1.0 / 7.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::config("adam_epsilon must be positive and clip_norm non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!("val_fraction {} not in [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

/// Scales `grad` down to `max_norm` if its Euclidean norm exceeds it;
/// returns whether it did.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> bool {
    if max_norm <= 0.0 {
        return false;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
        true
    } else {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub clip_events: usize,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_top1,val_top5,clip_events";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let _ = writeln!(out, "{},{},{},{},{}", m.epoch, m.train_loss, m.val_top1, m.val_top5, m.clip_events);
    }
    out
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation top-1 (earliest on ties).
    pub best: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Deterministic train/val partition of a training pool.
pub fn split_train_val(dataset: &GaitDataset, config: &TrainConfig) -> (GaitDataset, GaitDataset) {
    let mut rng = rng_for(config.seed, stream::SPLIT);
    dataset.split_off(config.val_fraction, &mut rng, Split::Train, Split::Val)
}

/// Builds the configured model with seed-derived initialization.
pub fn init_model(config: &TrainConfig, num_classes: usize) -> Result<Model> {
    let spec = config.model.resolve(num_classes)?;
    if spec.num_classes()? != num_classes {
        return Err(Error::config(format!(
            "model produces {} logits but the dataset has {num_classes} classes",
            spec.num_classes()?
        )));
    }
    Model::new(spec, &mut rng_for(config.seed, stream::INIT))
}

/// Splits `dataset` into train/val, trains a freshly initialized model and
/// keeps the best validation epoch.
pub fn train(dataset: &GaitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let (tr, val) = split_train_val(dataset, config);
    let model = init_model(config, dataset.num_classes)?;
    train_model(model, &tr, &val, config)
}

/// Mean cross-entropy and its gradient for one batch; the second value is the
/// batch-norm state after the pass.
pub fn batch_loss_and_grad(model: &Model, cycles: &[&GaitCycle]) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = tape.leaf(Tensor::from_vec(model.params().to_vec()), true);
    let input = tape.constant(model.encode(cycles)?);
    let fwd = model.forward(&mut tape, params, input, Mode::Train)?;
    let labels = cycles.iter().map(|c| c.label as usize).collect();
    let loss = tape.cross_entropy(fwd.logits, labels)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g = grads.get_or_zeros(params, tape.value(params)).into_data();
    Ok((value, g, fwd.bn_mu))
}

pub fn train_model(mut model: Model, train_set: &GaitDataset, val_set: &GaitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if train_set.num_classes != model.num_classes() {
        return Err(Error::config(format!(
            "model produces {} logits but the dataset has {} classes",
            model.num_classes(),
            train_set.num_classes
        )));
    }
    let mut batch_rng = rng_for(config.seed, stream::BATCHES);
    let mut aug_rng = rng_for(config.seed, stream::AUGMENT);
    let mut adam = Adam::new(model.param_count(), config.beta1, config.beta2, config.adam_epsilon);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut batch_rng);
        let epoch_cycles: Vec<GaitCycle> = match config.augmentation {
            Augmentation::None => Vec::new(),
            Augmentation::Rotate => train_set.randomly_rotated(&mut aug_rng).cycles,
        };
        let source = if epoch_cycles.is_empty() { &train_set.cycles } else { &epoch_cycles };
        let (mut loss_sum, mut clip_events) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&GaitCycle> = chunk.iter().map(|&i| &source[i]).collect();
            let (loss, mut grad, bn) = batch_loss_and_grad(&model, &batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    message: format!("epoch {epoch}: loss {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            clip_events += usize::from(clip_global_norm(&mut grad, config.clip_norm));
            let mut params = model.params().to_vec();
            adam.step(&mut params, &grad, config.learning_rate);
            model.set_params(params)?;
            model.set_bn_state(bn)?;
        }
        let (val_top1, val_top5) = if val_set.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&model, val_set)?;
            (r.top1, r.top5)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_top1,
            val_top5,
            clip_events,
        };
        if best.as_ref().is_none_or(|(b, _)| val_top1 > *b) {
            let meta = CheckpointMeta {
                seed: config.seed,
                epoch,
                train_loss: metrics.train_loss,
                val_top1,
                val_top5,
            };
            best = Some((val_top1, Checkpoint::from_model(&model, meta)));
        }
        history.push(metrics);
    }
    let best = match best {
        Some((_, c)) => c,
        None => Checkpoint::from_model(
            &model,
            CheckpointMeta {
                seed: config.seed,
                epoch: 0,
                train_loss: f64::NAN,
                val_top1: 0.0,
                val_top5: 0.0,
            },
        ),
    };
    Ok(TrainOutcome { best, history })
}
