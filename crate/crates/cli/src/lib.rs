pub mod args;
pub mod commands;
pub mod report;
pub mod sweep;

use args::{Cli, Command};

/// Exit code 1 for bad invocations, 2 for runtime failures.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<flowstep_core::Error> for CliError {
    fn from(e: flowstep_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let g = &cli.global;
    if g.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::GenData { kind, n } => commands::gen_data(g, kind, *n),
        Command::Train { method } => commands::cmd_train(g, method.as_deref()),
        Command::Distill { teacher } => commands::cmd_distill(g, teacher),
        Command::Reflow { base } => commands::cmd_reflow(g, base),
        Command::FitBespoke { base, n } => commands::cmd_fit_bespoke(g, base, *n),
        Command::Sample {
            model,
            nfe,
            n,
            transform,
            data,
        } => commands::cmd_sample(g, model, *nfe, *n, transform.as_deref(), data.as_deref()),
        Command::Sweep => commands::cmd_sweep(g),
        Command::Report {
            csv,
            format,
            metric,
            log_scale,
        } => commands::cmd_report(g, csv, *format, metric, *log_scale),
    }
}
