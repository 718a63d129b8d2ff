//! Coupled video clustering and dispatch policy networks for next-day peak
//! VOD dispatch, plus the synthetic workload and evaluation tools around them.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of
//! its inputs and an explicit seed; file formats, threads and the command line
//! live in the `vodnet` crate.
//!
//! Module map:
//!
//! - [`tensor`], [`activation`], [`params`], [`gradcheck`], [`checkpoint`]:
//!   dense numerics, MBGD, gradient verification and the binary checkpoint codec.
//! - [`temporal`]: the shared peak/mean convolution + GRU layers.
//! - [`cluster`]: normalization, 2-D autoencoder and the hierarchical block grid.
//! - [`policy`]: accumulation by cluster, the policy head and its loss.
//! - [`trainer`]: versioned model store, replay dataset and the two trainers.
//! - [`dispatch`]: post-processing, threshold baseline, objective and metrics.
//! - [`worldgen`]: synthetic request logs and the data analyzers.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod activation;
pub mod checkpoint;
pub mod cluster;
pub mod dense;
pub mod dispatch;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod policy;
pub mod request;
pub mod rng;
pub mod temporal;
pub mod tensor;
pub mod trainer;
pub mod worldgen;

pub use error::{Error, Result};
pub use params::{OptimizerState, ParamSet};
pub use request::RequestTensor;
pub use rng::Seed;
pub use tensor::Tensor;
