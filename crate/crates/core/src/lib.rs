pub mod config;
pub mod data;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod inversion;
pub mod losses;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
