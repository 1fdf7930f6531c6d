//! Mutual-information estimation with conditional rectified-flow models.
//!
//! A conditional rectified flow transports `N(0, I)` to `p(x | y)` along
//! straight lines `x_t = t x1 + (1 - t) x0`. For that path the velocity
//! determines the score of every intermediate marginal, and the mutual
//! information between data and condition becomes a time integral of
//! `t / (1 - t) * u(x_t | y) . (u(x_t | y) - u(x_t))`. This crate provides:
//!
//! - [`nn`]: a small dense network with exact gradients and AdamW
//! - [`flow`]: CFM training with null-condition masking, guidance and Euler sampling
//! - [`timesampling`]: the truncated importance density and its Lambert-W inverse CDF
//! - [`mi`]: aggregate and point-wise MI estimation, plus closed-form Gaussian oracles
//! - [`bench`]: known-MI tasks, an InfoNCE baseline and the benchmark runner
//! - [`finetune`]: selecting high-MI self-generated samples and fine-tuning on them
//! - [`cli`]: the configuration and command layer behind the `rfmi` binary

pub mod bench;
pub mod cli;
pub mod error;
pub mod finetune;
pub mod flow;
pub mod mi;
pub mod nn;
pub mod quadrature;
pub mod rng;
pub mod timesampling;

pub use error::{Error, Result};
