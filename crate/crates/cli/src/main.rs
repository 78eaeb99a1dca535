mod args;
mod commands;
mod config_file;

use std::process::ExitCode;

use clap::Parser;
use sdan_core::SdanError;

use args::Cli;
use config_file::SpliceError;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

pub fn exit_code(e: &SdanError) -> u8 {
    match e {
        SdanError::Config(_) | SdanError::Dimension(_) => EXIT_CONFIG,
        SdanError::Io { .. } | SdanError::Decode { .. } | SdanError::Generation(_) => EXIT_IO,
        SdanError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn configure_threads(deterministic: bool) -> Result<usize, String> {
    let requested = if deterministic {
        1
    } else {
        match std::env::var("SDAN_THREADS") {
            Ok(v) => v
                .trim()
                .parse::<usize>()
                .map_err(|_| format!("SDAN_THREADS must be a non-negative integer, got '{v}'"))?,
            Err(_) => 0,
        }
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(requested)
        .build_global()
        .map_err(|e| e.to_string())?;
    Ok(rayon::current_num_threads())
}

fn main() -> ExitCode {
    let argv = match config_file::splice(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(SpliceError::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(SpliceError::Io(msg)) => {
            eprintln!("error: cannot read config file {msg}");
            return ExitCode::from(EXIT_IO);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = match configure_threads(cli.deterministic) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match commands::run(cli, threads) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
