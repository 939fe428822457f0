//! Experiment driver for the mean-field Fisher-Wright toolkit: config
//! parsing, the four desk-scale experiments, and deterministic CSV/JSON
//! persistence. The `mfsim` binary wires these to subcommands.

pub mod config;
pub mod experiments;
pub mod report;
