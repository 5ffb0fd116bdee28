//! Metrics, baselines, synthetic data, benchmark runner and checkpoints.

pub mod baselines;
pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod probe;
pub mod synth;

pub use baselines::{baseline_impute, mean_impute, Baseline};
pub use benchmark::{run_benchmark, BenchmarkReport, MethodRow, MethodSummary};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{DataSource, EvalMask, Method, RunConfig};
pub use metrics::{auroc, rmse_masked};
pub use probe::{LogisticProbe, ProbeConfig};
pub use synth::{synth_generate, Covariance, SynthSpec};
