//! CPU-only perception toolkit for forward-looking sonar imagery.
//!
//! The crate implements the full stack from scratch: a dense tensor type,
//! hand-derived CNN layers with gradient-checked backward passes, losses and
//! optimizers, builders for a family of small sonar networks, template
//! matching, objectness-based detection proposals, evaluation metrics, a
//! seeded synthetic sonar-scene generator, and end-to-end experiment
//! pipelines. Everything runs deterministically from a seed.

pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod pipelines;
pub mod synth;
pub mod tensor;
pub mod tmatch;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
