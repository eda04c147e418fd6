pub mod analysis;
pub mod data;
pub mod error;
pub mod harness;
pub mod merge;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
