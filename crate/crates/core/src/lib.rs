//! Masked-autoencoder pre-training guided by an edge-map prior and a frozen
//! image-text embedder, with downstream probes and evaluation metrics.
//!
//! Numeric code is generic over [`scalar::Real`]; the aliases below fix the
//! two supported precisions.

pub mod backbone;
pub mod dataio;
pub mod downstream;
pub mod error;
pub mod numcheck;
pub mod pretrainer;
pub mod scalar;
pub mod seed;
pub mod semantic_prior;
pub mod structural_prior;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};

pub type ModelParams32 = backbone::ModelParams<f32>;
pub type ModelParams64 = backbone::ModelParams<f64>;
pub type TrainState32 = pretrainer::TrainState<f32>;
pub type TrainState64 = pretrainer::TrainState<f64>;
pub type Dataset32 = dataio::Dataset<f32>;
pub type Dataset64 = dataio::Dataset<f64>;
pub type Image32 = tokenizer::ImageTensor<f32>;
pub type Image64 = tokenizer::ImageTensor<f64>;
