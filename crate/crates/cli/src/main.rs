//! `cardioseg` command-line entry point.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in defaults to start from.
    #[arg(long, global = true, default_value = "desk", value_parser = ["desk", "full"])]
    pub profile: String,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug)]
pub struct OutArg {
    /// Output directory; defaults to `$CARDIOSEG_OUT/<command>` or `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Arch {
    Unet,
    Resunet,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Ce,
    Dice,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    Testc,
}

#[derive(Args, Clone, Debug)]
pub struct TrainOverrides {
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Network depth (number of pooling levels).
    #[arg(long)]
    pub depth: Option<usize>,
    /// Crop size in pixels (square).
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom cohort (manifest, blobs, previews).
    Generate {
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a network on the labeled patients of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Match training images to the unlabeled vendor's histograms.
        #[arg(long)]
        histmatch: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a checkpoint on one split of a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Predict and filter masks for the unlabeled pool.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Accept every prediction.
        #[arg(long)]
        vacuous: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run the supervised / semi-supervised scenario ladder.
    Scenarios {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated subset, e.g. `FS,SSH`.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
        /// Comma-separated seeds; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[command(flatten)]
        out: OutArg,
    },
    /// Match one PNG's histogram to another's and write a triptych.
    Histmatch {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Matched PNG; the triptych goes beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        bins: usize,
    },
    /// Render a scenario CSV as a table with per-scenario means.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Print the full configuration reference with defaults.
    Config,
}

#[derive(Parser)]
#[command(name = "cardioseg", version, about = "Cardiac MRI segmentation with pseudo-label retraining")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { out } => commands::generate(&cli.common, &out),
        Command::Train {
            manifest,
            overrides,
            histmatch,
            out,
        } => commands::train(&cli.common, &manifest, &overrides, histmatch, &out),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            out,
        } => commands::evaluate(&cli.common, &checkpoint, &manifest, split, &out),
        Command::PseudoLabel {
            checkpoint,
            manifest,
            vacuous,
            out,
        } => commands::pseudo_label(&cli.common, &checkpoint, &manifest, vacuous, &out),
        Command::Scenarios {
            manifest,
            only,
            seeds,
            jobs,
            overrides,
            out,
        } => commands::scenarios(&cli.common, &manifest, only, seeds, jobs, &overrides, &out),
        Command::Histmatch {
            source,
            reference,
            out,
            bins,
        } => commands::histmatch(&cli.common, &source, &reference, &out, bins),
        Command::Report { csv } => commands::report(&csv),
        Command::Config => commands::config(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
