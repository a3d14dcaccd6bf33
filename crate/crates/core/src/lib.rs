pub mod artifacts;
pub mod error;
pub mod linalg;
pub mod optimize;
pub mod par;
pub mod pipeline;
pub mod reduction;
pub mod risk;
pub mod stress;
pub mod surrogate;
pub mod thermal;

pub use error::{Error, Result};
