//! Latency measurement at batch size 1.
//!
//! Model construction, weight initialization and optional batch-norm folding
//! happen before the clock starts; only forward passes are timed, each with
//! a monotonic clock. Warmup passes run first and are discarded.

use std::fmt;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::graph::{build_model, ModelConfig};
use crate::tensor::{Dims, Tensor};
use crate::weights::init_random;

use super::fold::fold_batchnorm;
use super::session::InferenceSession;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchOptions {
    pub iters: usize,
    pub warmup: usize,
    pub fold_bn: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            iters: 30,
            warmup: 5,
            fold_bn: false,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 0,
        }
    }
}

/// Summary statistics over timed iterations, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
    /// Sample standard deviation over the mean; 0 for a single sample.
    pub cv: f64,
    pub min: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len();
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = samples.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        let cv = if n > 1 && mean > 0.0 {
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() / mean
        } else {
            0.0
        };
        Some(LatencyStats {
            mean,
            median,
            p95: sorted[rank - 1],
            cv,
            min: sorted[0],
            max: sorted[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub model: String,
    pub input: Dims,
    pub iters: usize,
    pub warmup: usize,
    pub fold_bn: bool,
    pub threads: usize,
    pub node_count: usize,
    /// Post-warmup forward-pass times.
    pub samples_ms: Vec<f64>,
    pub stats: LatencyStats,
}

impl BenchReport {
    /// One row per timed iteration, then a `median` summary row.
    pub fn write_csv(&self, mut w: impl Write, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "model,input_h,input_w,fold,threads,iter,ms")?;
        }
        let prefix = format!(
            "{},{},{},{},{}",
            self.model, self.input.h, self.input.w, self.fold_bn, self.threads
        );
        for (i, ms) in self.samples_ms.iter().enumerate() {
            writeln!(w, "{prefix},{i},{ms:.4}")?;
        }
        writeln!(w, "{prefix},median,{:.4}", self.stats.median)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} input {}x{} fold={} threads={} nodes={}: median {:.2} ms, mean {:.2} ms, p95 {:.2} ms, cv {:.1}% ({} iters after {} warmup)",
            self.model,
            self.input.h,
            self.input.w,
            self.fold_bn,
            self.threads,
            self.node_count,
            self.stats.median,
            self.stats.mean,
            self.stats.p95,
            100.0 * self.stats.cv,
            self.iters,
            self.warmup
        )
    }
}

/// Seeded uniform `[-1, 1)` tensor.
pub fn random_input(dims: Dims, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len())
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    Tensor::from_vec(dims, data).expect("length matches dims")
}

/// Builds `cfg`, initializes seeded weights, optionally folds batch norm and
/// times `opts.iters` forward passes on a `(1, 3, h, w)` input after
/// `opts.warmup` untimed ones.
pub fn benchmark(
    cfg: &ModelConfig,
    input_hw: (usize, usize),
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if opts.iters == 0 {
        bail!(InvalidInput, "benchmark needs at least one timed iteration");
    }
    if opts.threads == 0 {
        bail!(InvalidInput, "thread count must be positive");
    }
    let graph = build_model(cfg)?;
    let weights = init_random(&graph, opts.seed);
    let (graph, weights) = if opts.fold_bn {
        fold_batchnorm(&graph, &weights)?
    } else {
        (graph, weights)
    };
    let node_count = graph.len();
    let dims = Dims::new(1, 3, input_hw.0, input_hw.1);
    let mut session = InferenceSession::new(Arc::new(graph), Arc::new(weights), dims)?;
    let input = random_input(dims, opts.seed ^ 0x5eed);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let samples_ms = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..opts.warmup {
            session.run(&input)?;
        }
        let mut samples = Vec::with_capacity(opts.iters);
        for _ in 0..opts.iters {
            let t = Instant::now();
            let out = session.run(&input)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
        Ok(samples)
    })?;
    let stats = LatencyStats::from_samples(&samples_ms).expect("iters >= 1");
    Ok(BenchReport {
        model: cfg.name(),
        input: dims,
        iters: opts.iters,
        warmup: opts.warmup,
        fold_bn: opts.fold_bn,
        threads: opts.threads,
        node_count,
        samples_ms,
        stats,
    })
}
