//! Command-line front end for the `rankreg` library.

pub mod commands;
pub mod config;

pub use commands::{dispatch, parse_generations};
pub use config::{parse_config, parse_config_text, Command, ParseError, RunConfig};
