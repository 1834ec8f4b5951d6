//! Collaborative anomaly detection.
//!
//! Many related anomaly-detection tasks (one per item, say) share a single
//! population of samples. Each task `t` is scored with a conditional
//! log-likelihood ratio `f(x, e_t) ≈ log q_t(x) / p(x)` where `p` is the
//! exposure-weighted population mixture and `e_t` a trainable task
//! embedding. The crate covers the full pipeline:
//!
//! * [`nn`]: dense networks with hand-derived gradients and optimizers.
//! * [`clr`]: contrastive sampling, joint training and scoring.
//! * [`embed`]: task-embedding initializers, including embeddings learned
//!   from a few seed tasks.
//! * [`density`]: conditional Gaussian and masked autoregressive flow baselines.
//! * [`synth`]: synthetic multi-task benchmarks with known task structure.
//! * [`data`]: exposure-log ingestion and task filtering.
//! * [`eval`]: AUC, KL and rank-correlation metrics and numeric oracles.
//! * [`pipeline`]: the end-to-end training and evaluation recipes.

pub mod clr;
pub mod data;
pub mod density;
pub mod embed;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use train::{LossTrace, TrainConfig};
pub use types::{
    validate_collection, Benchmark, EvalReport, FeatureVector, TaskCollection, TaskDataset,
    TaskEmbedding, TaskTestSpec, TestPool,
};
