//! The `equivar` command line.
//!
//! Exit codes: 0 success, 1 validation failure or bad usage, 2 I/O or
//! checkpoint failure.

mod losscheck;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use equivar_core::augment::{AugmentationSampler, AugmentationSpec, Modality, SamplerConfig};
use equivar_core::eval::{linear_probe, retrieval_eval, EmbedOptions, FeatureSource, ProbeConfig};
use equivar_core::gradcheck::{fresh_setup, gradcheck, GradcheckConfig};
use equivar_core::model::ModelConfig;
use equivar_core::pipeline::{
    generate_synthetic_pairs, held_out_pairs, load_checkpoint, RunOptions, TrainConfig, Trainer,
};
use equivar_core::Error;

#[derive(Parser, Debug)]
#[command(name = "equivar", version, about = "Equivariant audio-visual contrastive learning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on synthetic pairs described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics.jsonl and checkpoints.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Checkpoint every N steps (0: only at the end).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        /// Continue from a checkpoint of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out synthetic pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Zero-shot retrieval (the default).
        #[arg(long, conflicts_with = "probe")]
        retrieval: bool,
        /// Linear probe on frozen pooled features.
        #[arg(long)]
        probe: bool,
        #[arg(long, value_enum, default_value_t = Source::Concatenated)]
        source: Source,
        #[arg(long, default_value_t = 16)]
        gallery: usize,
        /// Held-out items per class.
        #[arg(long, default_value_t = 16)]
        held_out: usize,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of a freshly initialized desk-scale model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print sampled augmentations as JSON lines.
    Augdump {
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u64,
    },
    /// Gradient-factor relation and brute-force loss comparisons.
    Losscheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Audio,
    Visual,
    Concatenated,
}

impl From<Source> for FeatureSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Audio => FeatureSource::Audio,
            Source::Visual => FeatureSource::Visual,
            Source::Concatenated => FeatureSource::Concatenated,
        }
    }
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse::<Modality>().map_err(|e| e.to_string())
}

/// A failed command: message plus exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_persistence() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn validation(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

/// Runs one invocation, writing reports to `out`. Diagnostics go to stderr.
pub fn run(argv: &[String], out: &mut dyn Write) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T, file: Option<&Path>) -> Result<(), Failure> {
    let line = serde_json::to_string(value).expect("report serializes");
    writeln!(out, "{line}").map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    if let Some(path) = file {
        std::fs::write(path, format!("{line}\n")).map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<u8, Failure> {
    match command {
        Command::Train {
            config,
            out: dir,
            checkpoint_every,
            resume,
        } => train(&config, &dir, checkpoint_every, resume.as_deref(), out),
        Command::Eval {
            checkpoint,
            retrieval: _,
            probe,
            source,
            gallery,
            held_out,
            out: file,
        } => evaluate(&checkpoint, probe, source.into(), gallery, held_out, file.as_deref(), out),
        Command::Gradcheck { seed, tolerance } => {
            let config = TrainConfig::default();
            let (mut model, batch) = fresh_setup(&config, seed)?;
            let gc = GradcheckConfig {
                seed,
                ..GradcheckConfig::default()
            };
            let report = gradcheck(&mut model, &batch, &config, &gc)?;
            let passed = report.passed(tolerance);
            #[derive(Serialize)]
            struct Summary<'a> {
                max_rel_err: f64,
                worst: &'a str,
                tensors: usize,
                evaluations: usize,
                loss: f64,
                passed: bool,
            }
            emit(
                out,
                &Summary {
                    max_rel_err: report.max_rel_err,
                    worst: &report.worst,
                    tensors: report.tensors.len(),
                    evaluations: report.evaluations,
                    loss: report.loss,
                    passed,
                },
                None,
            )?;
            Ok(if passed { 0 } else { 1 })
        }
        Command::Augdump { modality, seed, count } => {
            let extent = ModelConfig::default().extent(modality);
            let mut sampler = AugmentationSampler::new(SamplerConfig::default(), modality, extent, seed);
            #[derive(Serialize)]
            struct Line {
                draw: u64,
                #[serde(flatten)]
                spec: AugmentationSpec,
                vector: Vec<f64>,
            }
            for draw in 0..count {
                let (spec, vector) = sampler.sample();
                emit(
                    out,
                    &Line {
                        draw,
                        spec,
                        vector: vector.values,
                    },
                    None,
                )?;
            }
            Ok(0)
        }
        Command::Losscheck { seed } => {
            let report = losscheck::run(seed).map_err(Failure::from)?;
            let passed = report.passed;
            emit(out, &report, None)?;
            Ok(if passed { 0 } else { 1 })
        }
    }
}

fn train(
    config_path: &Path,
    dir: &Path,
    checkpoint_every: u64,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(config_path).map_err(|e| io_failure(config_path, e))?;
    let config = TrainConfig::from_json(&text)?;
    let data = generate_synthetic_pairs(&config.data_config(), &config.model_config())?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != config {
                return Err(validation(format!(
                    "checkpoint {} was written for a different config",
                    path.display()
                )));
            }
            Trainer::from_checkpoint(&ckpt)?
        }
        None => Trainer::new(config, data.len())?,
    };
    let opts = RunOptions {
        metrics: Some(dir.join("metrics.jsonl")),
        checkpoint_dir: Some(dir.to_path_buf()),
        checkpoint_every,
        stop_at: None,
    };
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let records = trainer.run(&data, &opts)?;
    #[derive(Serialize)]
    struct Summary {
        steps: u64,
        epochs: u64,
        first_loss_inter: Option<f64>,
        last_loss_inter: Option<f64>,
        checkpoint: String,
    }
    emit(
        out,
        &Summary {
            steps: trainer.step,
            epochs: trainer.epoch(),
            first_loss_inter: records.first().map(|r| r.loss_inter),
            last_loss_inter: records.last().map(|r| r.loss_inter),
            checkpoint: equivar_core::pipeline::checkpoint_path(dir, trainer.step).display().to_string(),
        },
        None,
    )?;
    Ok(0)
}

fn evaluate(
    checkpoint: &Path,
    probe: bool,
    source: FeatureSource,
    gallery: usize,
    held_out: usize,
    file: Option<&Path>,
    out: &mut dyn Write,
) -> Result<u8, Failure> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let config = &ckpt.config;
    let test = held_out_pairs(&config.data_config(), &config.model_config(), held_out)?;
    if probe {
        let train = generate_synthetic_pairs(&config.data_config(), &config.model_config())?;
        let report = linear_probe(&model, &train, &test, source, &ProbeConfig::default())?;
        emit(out, &report, file)?;
    } else {
        let opts = EmbedOptions {
            anchor: config.inter_anchor,
            centroids: config.centroids,
            ..EmbedOptions::default()
        };
        let reports = retrieval_eval(&model, &test, Some(gallery), &opts)?;
        emit(out, &reports, file)?;
    }
    Ok(0)
}
