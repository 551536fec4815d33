pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod generator;
pub mod inference;
pub mod losses;
pub mod trainer;
pub mod warp;

pub use error::{Error, ErrorKind, Result};
