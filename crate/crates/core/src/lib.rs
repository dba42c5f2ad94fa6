//! Triple-stream metric learning for behavioural-action recognition on
//! synthetic long-tailed data: a small dense-tensor autodiff engine, a
//! three-modality snippet generator, stream encoders with three fusion
//! heads, hybrid metric/classification losses with long-tail variants,
//! an SGD training loop, k-NN evaluation and exact t-SNE projection.

pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod tsne;

pub use error::{Error, Result};
pub use tensor::Tensor;
