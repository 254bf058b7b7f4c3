//! Command-line front end: configuration, subcommands and the oracle suite.

pub mod commands;
pub mod config;
pub mod verify;

pub use config::RunConfig;
