#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod autoencoder;
pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod trainer;
pub mod uvit;

pub use error::{Error, Result};
