//! Experiment harness: configuration files and the command entry points
//! behind the `stable-gauss` binary.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_gradcheck, cmd_klprobe, cmd_sweep, cmd_table1, cmd_train, klprobe_csv, CommandError,
    DataSpec, GridSpec, KlProbeSpec, SweepSpec, ThresholdSpec, TrainSpec,
};
pub use config::ConfigMap;
