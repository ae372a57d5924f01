//! Hierarchical latent space folding for token embeddings, a small decoder-only
//! transformer that carries folding stages in its residual stream, and the metrics and
//! experiment runner used to compare it against an unfolded baseline.

pub mod autodiff;
pub mod error;
pub mod folding;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
pub use folding::{FoldTrace, FoldingConfig, FoldingLayer};
pub use harness::{ComparisonResult, RunConfig};
pub use math::{Mat, RngState};
pub use metrics::MetricsReport;
pub use model::{ModelConfig, Parameters};
