pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod location;
pub mod model;
pub mod par;
pub mod postprocess;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
