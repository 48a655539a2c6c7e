mod args;
mod commands;
mod config;
mod manifest;
mod render;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use hlfp_core::HlfpError;

use args::{Cli, Command};

/// A flag combination that clap cannot reject by itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<config::ConfigError>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<HlfpError>() {
            return match e {
                HlfpError::Unsupported(_)
                | HlfpError::InvalidArgument(_)
                | HlfpError::Validation(_)
                | HlfpError::Shape(_)
                | HlfpError::MissingParameter(_)
                | HlfpError::Checkpoint(_)
                | HlfpError::ArchFile(_)
                | HlfpError::Dataset(_) => EXIT_VALIDATION,
                HlfpError::Numeric(_) | HlfpError::Diverged { .. } | HlfpError::Io { .. } | HlfpError::Image(_) => {
                    EXIT_RUNTIME
                }
            };
        }
    }
    EXIT_RUNTIME
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let file = config::load(cli.config.as_deref())?;
    let format = cli.format.or(file.output.format).unwrap_or_default();
    let ctx = commands::Ctx { file, format };
    let (name, out) = match &cli.command {
        Command::Describe(a) => ("describe", commands::describe(&ctx, a)),
        Command::Build(a) => ("build", commands::build(a)),
        Command::Cost(a) => ("cost", commands::cost(&ctx, a)),
        Command::Train(a) => ("train", commands::train_cmd(&ctx, a)),
        Command::Eval(a) => ("eval", commands::eval(&ctx, a)),
        Command::Cutout(a) => ("cutout", commands::cutout(&ctx, a)),
        Command::Attend(a) => ("attend", commands::attend(&ctx, a)),
        Command::Bench(a) => ("bench", commands::bench_cmd(&ctx, a)),
    };
    out.map_err(|e| e.context(format!("hlfp {name}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(text) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
                return ExitCode::from(EXIT_RUNTIME);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
