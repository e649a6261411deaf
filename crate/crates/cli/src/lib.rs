//! Command-line companion to `tcc-core`: TOML run configuration, the
//! binary checkpoint format, metrics and trace files, FLOPs report files,
//! and the subcommands of the `tcc` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod fsutil;
pub mod metrics;
pub mod report;
pub mod trace_io;
