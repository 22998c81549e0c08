//! Command-line front end: config files, checkpoints, run manifests and
//! report writers, plus the subcommands built on them.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;
