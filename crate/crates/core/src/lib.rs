pub mod error;
pub mod datamodel;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod prediction;
pub mod synthgen;

pub use error::{Error, Result};
