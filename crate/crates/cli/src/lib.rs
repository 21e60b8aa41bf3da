//! Library side of the `mixlm` command: run configs, subcommand bodies,
//! the throughput bench and the ablation runner.

pub mod ablate;
pub mod bench;
pub mod commands;
pub mod config;

pub use ablate::{run_ablations, AblationGrid, AblationReport};
pub use bench::{run_bench, BenchRecord, BenchSpec, Representation};
pub use config::{RunConfig, RunPaths};
