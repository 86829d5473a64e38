//! Library side of the `maskpolicy` binary: config handling, subcommands,
//! gradient checks and plotting.

pub mod checks;
pub mod commands;
pub mod config;
pub mod plot;
