//! Mixed text/embedding LLM ranking at desk scale.
//!
//! An encoder model compresses item text into a few hidden rows; a ranker
//! model scores `query + item rows` prompts with a binary head. Both share one
//! decoder-only transformer implementation built on a small tape autodiff.
//! The prefill engine scores many items per query with shared-prefix KV reuse
//! and counts the attention and linear work it performs.

pub mod autodiff;
pub mod checkpoint;
pub mod cost_model;
pub mod data;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod mix;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Params64 = model::Params<f64>;
pub type Params32 = model::Params<f32>;
pub type Graph64 = autodiff::Graph<f64>;
