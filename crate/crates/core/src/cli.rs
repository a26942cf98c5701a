//! Command-line interface: training, evaluation, gradient checks, dataset
//! generation, and event-stream conversion.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::data;
use crate::error::{Error, Result};
use crate::events;
use crate::gradsuite;
use crate::io;
use crate::model::ModelKind;
use crate::train::{self, EvalMode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "spikezsl", version, about = "Spiking audio-visual zero-shot learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write metrics, report, and weights to --out.
    Train {
        /// Model variant: mdst or mdstpp.
        #[arg(long)]
        model: Option<ModelKind>,
        /// TOML run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory (overrides the config's data source).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained run directory.
    Eval {
        /// Run directory produced by `train` (contains config.json, weights/).
        #[arg(long)]
        weights: PathBuf,
        /// zsl or gzsl.
        #[arg(long)]
        split: EvalMode,
        /// Dataset directory; defaults to the run config's data source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Verify tape gradients against finite differences.
    Gradcheck {
        /// tensorcore, spiking, model, or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert an SPKT feature sequence into a polarity event stream.
    Egm {
        /// Input tensor file, shaped [frames, dims].
        #[arg(long)]
        input: PathBuf,
        /// Contrast threshold in log space.
        #[arg(long, default_value_t = events::DEFAULT_CONTRAST)]
        contrast: f64,
        /// Output text stream (lines `t x y p`).
        #[arg(long)]
        out: PathBuf,
        /// Optional dense event-grid output (SPKT).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

fn load_or_default_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            model,
            config,
            seed,
            out,
            data,
        } => {
            let mut cfg = load_or_default_config(&config)?;
            if let Some(kind) = model {
                cfg.model.kind = kind;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = data {
                cfg.data.path = Some(dir.display().to_string());
            }
            let report = train::run_training(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?);
            Ok(())
        }
        Command::Eval { weights, split, data } => {
            let (mut cfg, model) = train::load_run(&weights)?;
            if let Some(dir) = data {
                cfg.data.path = Some(dir.display().to_string());
            }
            let dataset = cfg.dataset()?;
            let report = train::evaluate(&model, &dataset, split)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?);
            Ok(())
        }
        Command::Gradcheck { module, seed } => {
            let results = gradsuite::run_suite(&module, seed)?;
            let mut worst = 0.0f64;
            for (name, report) in &results {
                println!("{name}: max rel err {:.3e}", report.max_rel_err);
                worst = worst.max(report.max_rel_err);
            }
            println!("worst: {worst:.3e}");
            if worst >= 1e-4 {
                return Err(Error::contract(format!(
                    "gradient check failed: max relative error {worst:.3e} >= 1e-4"
                )));
            }
            Ok(())
        }
        Command::GenData { config, out, seed } => {
            let mut cfg = load_or_default_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = data::synthetic_dataset(&cfg.data.spec, cfg.seed, &cfg.data.ratios)?;
            data::save_dataset(&out, &dataset)?;
            println!(
                "wrote {} samples over {} classes to {}",
                dataset.samples.len(),
                dataset.classes.len(),
                out.display()
            );
            Ok(())
        }
        Command::Egm {
            input,
            contrast,
            out,
            grid,
        } => {
            let features = io::read_spkt(&input)?;
            if features.shape().len() != 2 {
                return Err(Error::data(format!(
                    "expected a [frames, dims] tensor, got shape {:?}",
                    features.shape()
                )));
            }
            let (t_len, d) = (features.shape()[0], features.shape()[1]);
            let frames: Vec<events::Frame> = (0..t_len)
                .map(|t| {
                    let row: Vec<f64> = features.data()[t * d..(t + 1) * d]
                        .iter()
                        .map(|v| v.abs())
                        .collect();
                    events::Frame::new(row, 1, d)
                })
                .collect::<Result<_>>()?;
            let stream = events::generate_events(&frames, contrast)?;
            events::write_stream_file(&stream, &out)?;
            if let Some(grid_path) = grid {
                let g = events::feature_egm(&features, contrast)?;
                io::write_spkt(&grid_path, g.tensor())?;
            }
            println!("{} events from {} frames", stream.len(), t_len);
            Ok(())
        }
    }
}
