//! Zero-shot classifiers learned from quantified natural-language
//! explanations over synthetic structured tasks.

pub mod cli;
pub mod entailment;
pub mod error;
pub mod explanation;
pub mod model;
pub mod parallel;
pub mod parser;
pub mod persist;
pub mod quantifier;
pub mod report;
pub mod taskgen;
pub mod train;

pub use error::{Error, Result};
