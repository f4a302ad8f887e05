//! A desk-scale semantic segmentation engine built from first principles:
//! a minimal reverse-mode autodiff tensor core, a pyramid-pooling
//! segmentation network with dilated residual stages, an online
//! hard-negative mining loss, a competitive multi-model training scheme,
//! and a five-metric volumetric evaluation protocol with surface distances.
//!
//! Everything runs on the CPU in 32-bit floats (64-bit accumulation for
//! loss reductions) and is deterministic given the configured seeds.

pub mod cli;
pub mod config;
pub mod cts;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
