pub mod adversarial;
pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scoring;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
