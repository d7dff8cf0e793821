//! Local-global hierarchical segmentation transformer over a small
//! reverse-mode autodiff core.
//!
//! Pixels, superpixels and groups are updated in turn; coarse predictions are
//! brought back to full resolution through the attention-derived
//! association matrices between adjacent levels.
//!
//! Everything numeric is generic over [`numerics::Scalar`]; the aliases
//! below fix the two supported precisions.

pub mod assoc;
pub mod blocks;
mod error;
pub mod evalkit;
pub mod hierarchy;
pub mod model;
pub mod numerics;
#[cfg(test)]
mod reference;
pub mod rng;
pub mod synthshapes;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
