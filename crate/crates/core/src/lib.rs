// `Float` is f64 unless the `f32` feature is on, so casts to f64 are not always no-ops.
#![allow(clippy::unnecessary_cast)]

pub mod attention;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod scan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
