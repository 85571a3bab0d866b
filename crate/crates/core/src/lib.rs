pub mod analogs;
pub mod autodiff;
pub mod checkpoint;
pub mod continual;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use error::{Error, Result};
