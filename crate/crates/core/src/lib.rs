//! Perturbation-based, model-agnostic feature attribution for N-dimensional
//! inputs.
//!
//! An input is cut into hyper-rectangular chunks; random selections of
//! chunks are kept (the rest zeroed) and scored by a frozen model's loss.
//! Selections whose loss stays under a calibrated threshold are averaged,
//! weighted by `1 / (loss + 1)`, into a saliency map. For small chunk counts
//! the [`oracle`] computes the exact limit of that average.

pub mod attribution;
pub mod bridge;
pub mod chunking;
pub mod cli;
pub mod distribution;
pub mod eval;
pub mod models;
pub mod oracle;
pub mod pipeline;
pub mod sampler;
pub mod tensor;

pub use attribution::{Accumulator, Decomposition, SaliencyMap};
pub use chunking::{apply_mask, build_grid, ChunkGrid, SelectionVector};
pub use models::{LossValue, PlantedModel, PlantedModelSpec, Predictor};
pub use pipeline::{explain, ExplainConfig, Explanation};
pub use sampler::{SamplerConfig, ThresholdW};
pub use tensor::InputTensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Chunk(#[from] chunking::ChunkError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Bridge(#[from] bridge::BridgeError),
    #[error(transparent)]
    Sampler(#[from] sampler::SamplerError),
    #[error(transparent)]
    Attribution(#[from] attribution::AttributionError),
    #[error(transparent)]
    Oracle(#[from] oracle::OracleError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
