use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "flowstep", version, about = "Train, distill and benchmark few-step generative samplers")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,

    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Record wall-clock times. Outputs are then no longer byte-identical
    /// across runs.
    #[arg(long, global = true)]
    pub timing: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
    },
    /// Train a base model (ddpm, edm, fm, multiflow).
    Train {
        /// Method; overrides the config file.
        #[arg(long)]
        method: Option<String>,
    },
    /// Consistency-distill an EDM teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Generate reflow pairs from a flow model and retrain on them.
    Reflow {
        #[arg(long)]
        base: PathBuf,
    },
    /// Fit a bespoke scale-time transform for a flow model.
    FitBespoke {
        #[arg(long)]
        base: PathBuf,
        /// Number of solver steps; overrides the config file.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nfe: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Bespoke transform to sample with (flow models only).
        #[arg(long)]
        transform: Option<PathBuf>,
        /// Dataset whose condition rows are used; unconditional otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate every (method, nfe) cell of a sweep config.
    Sweep,
    /// Render a sweep CSV as a markdown table and/or SVG plot.
    Report {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Both)]
        format: ReportFormat,
        #[arg(long, default_value = "frechet")]
        metric: String,
        /// Logarithmic y axis in the plot.
        #[arg(long)]
        log_scale: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Markdown,
    Svg,
    Both,
}
