//! Library half of the `hybridsim` binary: configuration loading and the
//! subcommand implementations.

pub mod commands;
pub mod config;
