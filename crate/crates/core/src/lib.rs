pub mod error;
pub mod attacks;
pub mod cli;
pub mod eval;
pub mod imaging;
pub mod miura;
pub mod generators;
pub mod neural;
pub mod optim;

pub use error::{Error, Result};
