pub mod analysis;
pub mod baselines;
pub mod error;
pub mod grid;
pub mod harness;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod posterior;
pub mod util;

pub use error::{Error, Result};
