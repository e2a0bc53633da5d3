//! Experiment harness around `eoslab-core`: TOML run configs, CIFAR-10
//! loading, run directories (config snapshot + metrics CSV + summary),
//! sweeps over (optimizer, eta, epsilon), SVG plots, and markdown reports.
//! The `eoslab` binary exposes all of it as subcommands.

pub mod cifar;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod plot;
pub mod report;
pub mod rundir;
pub mod sweep;
