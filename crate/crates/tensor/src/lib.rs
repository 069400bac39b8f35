//! Minimal dense tensor engine: row-major arrays, a recording tape with
//! reverse-mode gradients, AdamW, and a finite-difference gradient check.

mod array;
mod error;
mod gradcheck;
mod optim;
mod scalar;
mod tape;

pub use array::NdArray;
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, FdOptions, FdReport, FdSample, Objective};
pub use optim::{AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
