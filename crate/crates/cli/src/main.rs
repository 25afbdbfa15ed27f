mod commands;
mod opts;
mod search;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use crate::opts::{Cli, Command};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Lib(sessrec::Error),
}

impl From<sessrec::Error> for CliError {
    fn from(e: sessrec::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use sessrec::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Lib(E::Config(_)) => 1,
            CliError::Lib(E::Diverged { .. }) => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn run(mut cli: Cli) -> Result<(), CliError> {
    cli.apply_config_file()?;
    match &cli.command {
        Command::Preprocess { paths, prep } => commands::preprocess(paths, prep),
        Command::Train { paths, model } => commands::train(paths, model),
        Command::Eval { paths, eval } => commands::eval(paths, eval),
        Command::Search {
            paths,
            model,
            eval,
            search,
        } => search::search(paths, model, eval, search),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SESSREC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
