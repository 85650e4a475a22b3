//! Masked-image-modeling text-to-image generation at desk scale.
//!
//! The pipeline: a VQ autoencoder turns images into token grids, a transformer
//! conditioned on text, micro-conditions and the current masking rate predicts
//! masked tokens, and a confidence-ranked parallel decoder with classifier-free
//! guidance turns an all-masked grid into an image. Editing reuses the decoder on
//! a partially masked grid.

pub mod checkpoint;
pub mod config;
pub mod backbone;
pub mod datagen;
pub mod editor;
pub mod error;
pub mod imageio;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod tokens;
pub mod trainer;
pub mod verify;
pub mod vq;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, ParamStore, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
