//! Graph execution, batch-norm folding and latency benchmarking.

pub mod bench;
pub mod fold;
pub mod session;

pub use bench::{benchmark, random_input, BenchOptions, BenchReport, LatencyStats};
pub use fold::fold_batchnorm;
pub use session::{
    calibrate_batchnorm, map_batchnorm_affine, run_inference, InferenceOutput, InferenceSession,
    KernelPath,
};
