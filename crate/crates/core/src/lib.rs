pub mod calibration;
pub mod diagnostics;
pub mod error;
pub mod expr;
pub mod inference;
pub mod latent;
pub mod likelihood;
pub mod mappers;
pub mod model;
pub mod sparse;
pub mod special;

pub use error::{Error, Result};
