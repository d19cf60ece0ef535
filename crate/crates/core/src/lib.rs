//! Receptive multi-granularity learning for stripe-based person features.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a small deterministic NCHW engine with forward and adjoint
//!   kernels plus a finite-difference gradient checker.
//! * [`receptive`]: receptive-field and stride calculus over a layer chain,
//!   restricted receptive regions and partition feasibility.
//! * [`partition`]: receptive partition, uniform stripes and
//!   activation-balanced pooling.
//! * [`augment`]: random-shifting augmentation and horizontal flipping.
//! * [`model`]: the toy two-branch dual-path network, its losses and training.
//! * [`eval`]: flip-mean embedding extraction and CMC / mAP retrieval metrics.
//! * [`data`], [`experiment`], [`checkpoint`]: synthetic data, run
//!   configuration and persistence used by the command-line harness.
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iteration otherwise. Results are
//! bit-identical either way.

pub mod augment;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod model;
pub mod partition;
pub mod receptive;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
