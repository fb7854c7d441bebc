//! The `qcnn` command line.
//!
//! Exit codes: 0 on success, 1 on user error (bad flags, paths, configs or
//! inputs), 2 on internal failure (divergence, numerical faults).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;

use crate::autodiff::{gradient_check, Tape};
use crate::data::{generate_synthetic_dataset, load_dataset, save_dataset, GaitCycle, Manifest, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::layers::{equivariance_suite, Mode, Model, ModelSpec};
use crate::training::{
    evaluate, flip_experiment, metrics_csv, rng_for, run_experiment_matrix, stream, train, Checkpoint, ExperimentConfig, FlipConfig, TrainConfig,
};
use crate::viz::{apply_kernel_trace, maximize_kernel_activation, render_svg, AscentConfig, KernelId, KernelTrace, VizDocument};

const EQUIVARIANCE_TOLERANCE: f64 = 1e-10;

#[derive(Parser, Debug)]
#[command(name = "qcnn", version, about = "Rotation-equivariant quaternion CNNs for gait classification")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// Seed for every random stream; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic gait dataset (binary file plus JSON manifest).
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        phase_shift: Option<f64>,
    },
    /// Train a model; writes the best checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV path; defaults to the checkpoint path with `.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate under the three rotation regimes.
    ExperimentMatrix,
    /// Compare accuracy on original and axis-flipped data.
    FlipExperiment,
    /// Random-trial equivariance check of the quaternion convolution.
    CheckEquivariance {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Finite-difference check of a small model's full gradient.
    GradCheck {
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Optimize maximally activating windows for a layer's kernels.
    VizKernels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Comma-separated output channels; all by default.
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<usize>>,
        #[arg(long, default_value_t = AscentConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = AscentConfig::default().step_size)]
        step_size: f64,
        /// Dataset whose cycle is traced through the kernels.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        trace_cycle: usize,
        /// Also render the document as SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn read_json<T: DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn require_out(shared: &Shared, what: &str) -> Result<PathBuf> {
    shared
        .out
        .clone()
        .ok_or_else(|| Error::Config(format!("--out is required: where to write the {what}")))
}

fn open_input<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::Config(format!("{}: no such file", path.display())));
    }
    load(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let shared = &cli.shared;
    match cli.command {
        Command::GenData {
            classes,
            per_class,
            noise,
            phase_shift,
        } => {
            let mut cfg: SynthConfig = read_config(shared.config.as_deref())?;
            cfg.num_classes = classes.unwrap_or(cfg.num_classes);
            cfg.cycles_per_class = per_class.unwrap_or(cfg.cycles_per_class);
            cfg.noise_sigma = noise.unwrap_or(cfg.noise_sigma);
            cfg.max_phase_shift = phase_shift.unwrap_or(cfg.max_phase_shift);
            let seed = shared.seed.unwrap_or(0);
            let path = require_out(shared, "dataset")?;
            let ds = generate_synthetic_dataset(&cfg, &mut rng_for(seed, stream::DATA))?;
            let manifest = Manifest {
                seed: Some(seed),
                noise_sigma: Some(cfg.noise_sigma),
                split: Split::Train,
            };
            save_dataset(&ds, &path, &manifest)?;
            writeln!(out, "wrote {} cycles, {} classes to {}", ds.len(), ds.num_classes, path.display())?;
        }
        Command::Train { data, metrics } => {
            let mut cfg: TrainConfig = read_config(shared.config.as_deref())?;
            if let Some(seed) = shared.seed {
                cfg.seed = seed;
            }
            let path = require_out(shared, "checkpoint")?;
            let ds = open_input(&data, load_dataset)?;
            let outcome = train(&ds, &cfg)?;
            outcome.best.save(&path)?;
            let metrics = metrics.unwrap_or_else(|| path.with_extension("metrics.csv"));
            write_text(&metrics, &metrics_csv(&outcome.history))?;
            let m = &outcome.best.meta;
            writeln!(
                out,
                "best epoch {}: val top-1 {:.2}%, top-5 {:.2}%; checkpoint {}, metrics {}",
                m.epoch,
                100.0 * m.val_top1,
                100.0 * m.val_top5,
                path.display(),
                metrics.display()
            )?;
        }
        Command::Eval { checkpoint, data } => {
            let model = open_input(&checkpoint, Checkpoint::load)?.to_model()?;
            let ds = open_input(&data, load_dataset)?;
            let report = evaluate(&model, &ds)?;
            write!(out, "{report}")?;
            if let Some(p) = &shared.out {
                let mut text = serde_json::to_string_pretty(&report)?;
                text.push('\n');
                write_text(p, &text)?;
            }
        }
        Command::ExperimentMatrix => {
            let mut cfg: ExperimentConfig = read_config(shared.config.as_deref())?;
            if let Some(seed) = shared.seed {
                cfg.seed = seed;
            }
            let report = run_experiment_matrix(&cfg)?;
            write!(out, "{}", report.to_text())?;
            if let Some(p) = &shared.out {
                write_text(p, &report.to_csv())?;
                write_text(&p.with_extension("txt"), &report.to_text())?;
            }
        }
        Command::FlipExperiment => {
            let mut cfg: FlipConfig = read_config(shared.config.as_deref())?;
            if let Some(seed) = shared.seed {
                cfg.seed = seed;
            }
            let report = flip_experiment(&cfg)?;
            write!(out, "{}", report.to_text())?;
            if let Some(p) = &shared.out {
                write_text(p, &report.to_csv())?;
                write_text(&p.with_extension("txt"), &report.to_text())?;
            }
        }
        Command::CheckEquivariance { trials } => {
            if trials == 0 {
                return Err(Error::Config("--trials must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(shared.seed.unwrap_or(0));
            let report = equivariance_suite(trials, &mut rng)?;
            writeln!(
                out,
                "max deviation {:.3e} over {} trials (largest output magnitude {:.3e})",
                report.max_deviation, report.trials, report.max_magnitude
            )?;
            if !(report.max_deviation <= EQUIVARIANCE_TOLERANCE) {
                return Err(Error::Domain(format!(
                    "deviation {:.3e} exceeds {EQUIVARIANCE_TOLERANCE:e}",
                    report.max_deviation
                )));
            }
        }
        Command::GradCheck { step, batch } => {
            let spec: ModelSpec = match shared.config.as_deref() {
                Some(p) => read_json(p)?,
                None => ModelSpec::small_qcnn(3),
            };
            let seed = shared.seed.unwrap_or(0);
            let err = model_gradient_error(spec, seed, step, batch)?;
            writeln!(out, "max relative gradient error {err:.3e}")?;
        }
        Command::VizKernels {
            checkpoint,
            layer,
            channels,
            steps,
            step_size,
            data,
            trace_cycle,
            svg,
        } => {
            let path = require_out(shared, "visualization JSON")?;
            let model = open_input(&checkpoint, Checkpoint::load)?.to_model()?;
            let seed = shared.seed.unwrap_or(0);
            let qparams = model.qconv_params(layer)?;
            let channels = channels.unwrap_or_else(|| (0..qparams.config.out_channels).collect());
            let ascent = AscentConfig { steps, step_size };
            let fragments = channels
                .iter()
                .map(|&o| maximize_kernel_activation(&model, layer, o, seed, &ascent).map(|r| r.fragment))
                .collect::<Result<Vec<_>>>()?;
            let mut traces = Vec::new();
            if let Some(d) = data {
                let ds = open_input(&d, load_dataset)?;
                let cycle = ds
                    .cycles
                    .get(trace_cycle)
                    .ok_or_else(|| Error::Config(format!("dataset has {} cycles, no cycle {trace_cycle}", ds.len())))?;
                for &o in &channels {
                    traces.push(KernelTrace {
                        kernel: KernelId { layer, out_channel: o },
                        cycle: trace_cycle,
                        outputs: apply_kernel_trace(&model, layer, o, cycle)?,
                    });
                }
            }
            let doc = VizDocument {
                checkpoint: checkpoint.display().to_string(),
                layer,
                seed,
                fragments,
                traces,
            };
            write_text(&path, &doc.to_json()?)?;
            if let Some(s) = &svg {
                write_text(s, &render_svg(&doc))?;
            }
            writeln!(out, "wrote {} fragments and {} traces to {}", doc.fragments.len(), doc.traces.len(), path.display())?;
        }
    }
    Ok(())
}

/// Max relative error of the train-mode cross-entropy gradient with respect
/// to every parameter, on a random batch.
fn model_gradient_error(spec: ModelSpec, seed: u64, h: f64, batch: usize) -> Result<f64> {
    if !(h > 0.0) || batch == 0 {
        return Err(Error::Config("--step and --batch must be positive".into()));
    }
    let k = spec.num_classes()?;
    let model = Model::new(spec, &mut rng_for(seed, stream::INIT))?;
    let t = model.spec().input_length;
    let mut rng = rng_for(seed, stream::DATA);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let cycles: Vec<GaitCycle> = (0..batch)
        .map(|i| GaitCycle {
            samples: (0..t).map(|_| [0; 3].map(|_| normal.sample(&mut rng))).collect(),
            label: (i % k) as u32,
        })
        .collect();
    let refs: Vec<&GaitCycle> = cycles.iter().collect();
    let input = model.encode(&refs)?;
    let labels: Vec<usize> = cycles.iter().map(|c| c.label as usize).collect();
    let point = model.params().to_vec();
    gradient_check(
        |tape: &mut Tape, p| {
            let x = tape.constant(input.clone());
            let f = model.forward(tape, p, x, Mode::Train)?;
            tape.cross_entropy(f.logits, labels.clone())
        },
        &point,
        h,
    )
}
