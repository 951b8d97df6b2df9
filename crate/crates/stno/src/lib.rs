//! Space-time video super-resolution with a Galerkin-attention neural operator.
//!
//! A CPU-only workbench: a small reverse-mode tensor tape, linear-complexity
//! Galerkin attention with texture/motion aggregation heads, a coarse-to-fine
//! coupled motion-estimation pipeline with bidirectional propagation and a
//! continuous coordinate decoder, a synthetic-video generator with analytic
//! ground-truth optical flow, and the training/evaluation/benchmark harness
//! around them.

pub mod error;
pub mod attention;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Value};
