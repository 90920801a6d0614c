//! Training multilayer perceptrons with backpropagation variants, and an
//! analytical cost model for a coarse-grain reconfigurable training
//! accelerator.

pub mod archmodel;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod learners;
pub mod linalg;
pub mod network;
pub mod scalar;
pub mod svg;

pub use error::{Error, Result};
pub use linalg::{Matrix, OpCounters};
pub use network::{NetworkSpec, Params};
pub use scalar::{Precision, Scalar};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Params32 = Params<f32>;
pub type Params64 = Params<f64>;
