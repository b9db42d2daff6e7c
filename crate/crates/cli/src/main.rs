mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use kws_core::manifest::FieldTag;
use kws_core::model::ReferenceModel;

use crate::config::{InputKind, Overrides, RunConfig};

/// Multi-channel keyword spotting: corpus simulation, training, evaluation
/// and the array front end.
#[derive(Debug, Parser)]
#[command(name = "kws", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for corpus generation, model initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output or run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for audio loading and features (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    /// Start from a documented model configuration.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<ReferenceModel>,
    /// Override the model's channel count.
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a seeded synthetic corpus with train, dev and eval manifests.
    Simulate {
        /// Scenes per field.
        #[arg(long)]
        count: Option<usize>,
        /// Fields to render, comma separated.
        #[arg(long, value_delimiter = ',')]
        fields: Vec<FieldTag>,
    },
    /// Run the training curriculum into the run directory given by --out.
    Train {
        /// Training manifest; repeat for several.
        #[arg(long)]
        train: Vec<PathBuf>,
        /// Development manifest used for best-checkpoint selection.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, value_enum)]
        input: Option<InputKind>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Pause after this many optimizer steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a manifest with a checkpoint and report FAR, FRR and Score.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Decision threshold; defaults to the checkpoint's.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the class histogram, by default to <out>/histogram.csv.
        #[arg(long, num_args = 0..=1)]
        export_hist: Option<Option<PathBuf>>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, value_enum)]
        input: Option<InputKind>,
    },
    /// Print the keyword probability of one recording.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        wav: PathBuf,
        #[arg(long, value_enum)]
        input: Option<InputKind>,
    },
    /// Multi-look MVDR beams plus raw channel 0 from a six-channel recording.
    Beamform {
        input: PathBuf,
        output: PathBuf,
        /// Look directions in degrees, comma separated.
        #[arg(long, value_delimiter = ',')]
        looks: Vec<f64>,
        /// Dereverberate with WPE before beamforming.
        #[arg(long)]
        wpe: bool,
    },
    /// WPE dereverberation of a multi-channel recording.
    Wpe {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        taps: Option<usize>,
        #[arg(long)]
        delay: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Write the class histogram of a checkpoint's scores on a manifest.
    ExportHist {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Destination CSV; defaults to <out>/histogram.csv.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long, value_enum)]
        input: Option<InputKind>,
    },
}

fn parse_preset(s: &str) -> std::result::Result<ReferenceModel, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        "expected one of single-channel, multi-channel, multi-channel-centroid, multi-look-centroid, compact".to_string()
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut o = Overrides {
        seed: g.seed,
        threads: g.threads,
        ..Overrides::default()
    };
    let load = |o: &Overrides| RunConfig::load(g.config.as_deref(), o);
    let out = g.out.as_deref();
    match cli.command {
        Command::Simulate { count, fields } => {
            o.count = count;
            o.fields = fields;
            commands::simulate(&load(&o)?, out, g.force)
        }
        Command::Train {
            train,
            dev,
            model,
            input,
            resume,
            stop_after,
        } => {
            o.train = train;
            o.dev = dev;
            o.preset = model.preset;
            o.channels = model.channels;
            o.input = input;
            commands::train(&load(&o)?, out, g.force, resume, stop_after)
        }
        Command::Eval {
            checkpoint,
            manifest,
            threshold,
            export_hist,
            bins,
            input,
        } => {
            o.input = input;
            let hist = export_hist.map(|p| commands::histogram_target(p, out)).transpose()?;
            commands::eval(load(&o)?, &checkpoint, &manifest, threshold, hist.map(|p| (p, bins)), out)
        }
        Command::Predict { checkpoint, wav, input } => {
            o.input = input;
            commands::predict(load(&o)?, &checkpoint, &wav)
        }
        Command::Beamform {
            input,
            output,
            looks,
            wpe,
        } => commands::beamform(&load(&o)?, &input, &output, &looks, wpe),
        Command::Wpe {
            input,
            output,
            taps,
            delay,
            iterations,
        } => commands::wpe(&load(&o)?, &input, &output, taps, delay, iterations),
        Command::ExportHist {
            checkpoint,
            manifest,
            output,
            bins,
            input,
        } => {
            o.input = input;
            let target = commands::histogram_target(output, out)?;
            commands::export_hist(load(&o)?, &checkpoint, &manifest, &target, bins)
        }
    }
}
