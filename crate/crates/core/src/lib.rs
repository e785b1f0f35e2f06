pub mod detector;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod kb;
pub mod memnet;
pub mod vocab;

pub use error::{Error, Result};
