pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
