//! Face super-resolution with a dense-block generator, a semantic encoder and
//! a joint image/semantics discriminator trained with a relativistic average
//! least-squares objective.

pub mod backbone;
pub mod blob;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod graph;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{FurnError, Result};
pub use tensor::Tensor;
