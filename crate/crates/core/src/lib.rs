//! FFNet segmentation networks: config-driven model construction, a CPU
//! inference engine, static analysis (receptive field, parameters, FLOPs,
//! memory traffic), batch-norm folding, benchmarking and a small image
//! toolchain.
//!
//! ```no_run
//! use std::sync::Arc;
//! use ffnet::{build_model, init_random, InferenceSession, ModelConfig, Tensor, Dims};
//!
//! let cfg: ModelConfig = "backbone=resnet22s stem=C up=C seg=C input_h=256 input_w=512"
//!     .parse()
//!     .unwrap();
//! let graph = build_model(&cfg).unwrap();
//! let weights = init_random(&graph, 0);
//! let dims = Dims::new(1, 3, 256, 512);
//! let mut session = InferenceSession::new(Arc::new(graph), Arc::new(weights), dims).unwrap();
//! let out = session.run(&Tensor::zeros(dims)).unwrap();
//! assert_eq!(out.logits.dims(), Dims::new(1, 19, 64, 128));
//! ```

pub mod analysis;
pub mod error;
pub mod graph;
pub mod runtime;
pub mod segtool;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use graph::{
    build_model, infer_shapes, BackboneConfig, BlockType, LayerGraph, ModelConfig, NodeId, Op,
    ShapeMap, Variant,
};
pub use runtime::{
    benchmark, fold_batchnorm, run_inference, BenchOptions, BenchReport, InferenceOutput,
    InferenceSession, KernelPath,
};
pub use tensor::{ClassMap, ConvParams, Dims, Tensor, UpsampleMode};
pub use weights::{init_random, load_weights, save_weights, WeightEntry, WeightStore};
