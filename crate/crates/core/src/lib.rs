//! Multi-subject, multi-task neural decoding with a brain-regional
//! mixture-of-experts transformer.

pub mod aggregation;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod coupcycle;
pub mod error;
pub mod fsio;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod rmae;
pub mod scalar;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{MobreError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelParams32 = params::ModelParams<f32>;
pub type ModelParams64 = params::ModelParams<f64>;
