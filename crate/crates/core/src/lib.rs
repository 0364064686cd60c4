//! Language-adaptive self-supervised speech pre-training with sparse
//! sharing sub-networks, at desk scale.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! engine, a miniature wav2vec2-style model (convolutional feature encoder,
//! transformer context network, Gumbel product quantizer), the contrastive
//! pre-training objective, a synthetic multilingual corpus with tempered
//! language sampling, per-language sub-network extraction (magnitude,
//! Taylor importance, random), masked joint adaptation, and mask analysis.
//!
//! Numeric code is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the common instantiations.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod pruning;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamTree32 = model::ParamTree<f32>;
pub type ParamTree64 = model::ParamTree<f64>;
pub type LatentSequence32 = model::LatentSequence<f32>;
pub type Trainer32 = train::Trainer<f32>;
