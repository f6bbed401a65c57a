//! Streaming selective state-space model for online phase recognition.
//!
//! Each layer runs a slow path, whose state is carried across clips and is
//! re-oriented by a learned rotation at chunk boundaries, next to a fast path
//! that restarts with every clip. A learned intensity stretches the step size
//! of the slow path. [`stream::StreamEngine`] advances the model one frame at a
//! time with fixed memory; [`matrixview`] builds the equivalent dense operator
//! for checking the scan.
//!
//! All arithmetic is `f64`. Weights and features are stored as `f32` on disk.

pub mod error;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod linalg;
pub mod losses;
pub mod matrixview;
pub mod model;
pub mod nn;
pub mod params;
pub mod real;
pub mod regram;
pub mod ssm;
pub mod stream;
pub mod tensor;
pub mod timewarp;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use real::{Precision, Real};
