//! Desk-scale lab for domain-adaptive region-free detection.
//!
//! The crate bundles a deterministic autodiff tensor engine, a miniature
//! single-shot detector, the densely semantic enhancement module (DSEM)
//! with its foreground-mask adversary, the two-stage pretrain/adapt
//! trainer, and a synthetic two-domain benchmark generator. Everything is
//! CPU-only, seeded, and bitwise reproducible.

pub mod boxes;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod dsem;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Parameter, Shape, Tensor};
