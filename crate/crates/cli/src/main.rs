//! `nlc`: data generation, training, sampling, restoration and evaluation
//! for noise-level-corrected diffusion sampling on toy manifolds.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
//! 3 unreadable or corrupt files. Failures print one JSON line on stderr.
//! `NLC_LOG` (quiet, info, debug) sets the log level; the default is info.

mod args;
mod commands;
mod config;
mod error;
mod runfile;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use nlc_core::neural::Role;

use args::{Cli, Command};
use config::resolve;
use error::{CliError, CliResult};

fn init_logging() -> CliResult<()> {
    let level = match std::env::var("NLC_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => return Err(CliError::config(format!("NLC_LOG must be quiet, info or debug, got `{other}`"))),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(a) => commands::gen_data(resolve(&a, a.config.as_deref(), "gen-data")?),
        Command::TrainDenoiser(a) => {
            commands::train_model(Role::Denoiser, resolve(&a, a.config.as_deref(), "train-denoiser")?)
        }
        Command::TrainNlc(a) => commands::train_model(Role::Corrector, resolve(&a, a.config.as_deref(), "train-nlc")?),
        Command::BuildLut(a) => commands::build_lut(resolve(&a, a.config.as_deref(), "build-lut")?),
        Command::Sample(a) => commands::sample_cmd(resolve(&a, a.config.as_deref(), "sample")?),
        Command::Restore(a) => commands::restore(resolve(&a, a.config.as_deref(), "restore")?),
        Command::Eval(a) => commands::eval(resolve(&a, a.config.as_deref(), "eval")?),
        Command::Report(a) => commands::report(resolve(&a, a.config.as_deref(), "report")?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::config(first).to_json_line());
            return ExitCode::from(2);
        }
    };
    let result = init_logging().and_then(|()| run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
