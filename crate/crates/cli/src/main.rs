use std::process::ExitCode;

use rankreg_cli::{dispatch, parse_config, ParseError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match parse_config(std::env::args_os()) {
        Ok(cfg) => cfg,
        Err(ParseError::Clap(e)) => e.exit(),
        Err(ParseError::Config(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            return ExitCode::from(2);
        }
    };
    match dispatch(&cfg) {
        Ok(paths) => {
            for p in paths {
                log::info!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
