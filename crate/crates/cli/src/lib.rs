//! Configuration, pipelines and subcommands behind the `crsfuse` binary.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::RunConfig;
