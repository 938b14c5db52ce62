//! Statistics and evaluation harnesses.

mod harness;
mod stats;

pub use harness::*;
pub use stats::{pearson_lcc, welch_ttest, Correlation, WelchTest};
