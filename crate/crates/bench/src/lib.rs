//! Benchmarks, fault scenarios and the pieces behind the `tfc` command.

pub mod runner;
pub mod scenario;
pub mod workload;

pub use runner::{run_bench, run_once, write_csv, BenchConfig, BenchError, BenchReport, NetMode};
pub use workload::{gen_workload, initial_data, Workload, WorkloadConfig, WorkloadError};
