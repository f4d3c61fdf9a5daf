pub mod autodiff;
pub mod error;
pub mod causal;
pub mod data;
pub mod distill;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod posenet;
pub mod train;

pub use error::{Error, Result};
