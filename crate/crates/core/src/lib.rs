pub mod autograd;
pub mod cli;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod featurepack;
pub mod ice;
pub mod irm;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tcp;
pub mod trainer;

pub use error::{Error, Result};
