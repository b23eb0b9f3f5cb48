//! Compressive spectral imaging core: CASSI physics operators, a small
//! reverse-mode autodiff tensor engine, the PGDUDST unfolding reconstructor,
//! classical baselines, and image-quality metrics.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all IO, file formats
//! and the CLI live in the companion `pgdudst` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod baseline;
pub mod data;
pub mod dst;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod physics;
pub mod rng;
pub mod tensor;
pub mod unfold;

pub use error::{CoreError, Result};
