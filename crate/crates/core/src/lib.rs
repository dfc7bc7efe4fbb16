//! Sequential recommendation with a self-attentive encoder trained against
//! model-conditioned negative items (GenNi).
//!
//! Numeric code is generic over [`numcore::Scalar`]; the aliases below fix
//! the scalar to `f32` or `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod numcore;
pub mod rng;
pub mod sampler;
pub mod synthetic;
pub mod tolerance;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Graph32 = numcore::Graph<f32>;
pub type Graph64 = numcore::Graph<f64>;
pub type EncoderParams32 = encoder::EncoderParams<f32>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
pub type Checkpoint32 = encoder::Checkpoint<f32>;
pub type Checkpoint64 = encoder::Checkpoint<f64>;
pub type TrainOutcome32 = training::TrainOutcome<f32>;
pub type TrainOutcome64 = training::TrainOutcome<f64>;
