//! Knowledge-component correctness labeling for student code and the
//! learning-curve analytics used to evaluate the labels.

pub mod analytics;
pub mod artifact;
pub mod config;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod gateway;
pub mod ingest;
pub mod kc_pipeline;
pub mod labeling;
pub mod model;
mod par;
pub mod pipeline;
pub mod plot;
pub mod prompts;

pub use error::{Error, Result};
