//! Library side of the `apsm` command-line tool: config parsing, cohort
//! loading, subcommand implementations, and artifact writers. The binary in
//! `main.rs` is a thin argument-parsing shell over this crate.

pub mod commands;
pub mod config;
pub mod errors;
pub mod pipeline;
pub mod report;
