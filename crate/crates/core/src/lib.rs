//! Sequential models for predicting treatment adherence and symptom scores
//! over a six-visit immunotherapy timeline.

pub mod artifact;
pub mod attribution;
pub mod config;
pub mod criteria;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod lstm;
pub mod nn;
pub mod pipeline;
pub mod slvm;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
