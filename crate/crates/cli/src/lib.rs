//! Command-line front end: vocabulary, dataset and config files, and the
//! `vega` subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod vocab;

pub use commands::{run, Cli, Command, Strategy};
pub use config::{PathConfig, RunConfig, SEED_ENV};
pub use dataset::{load_dataset, parse_dataset};
pub use vocab::Vocab;
