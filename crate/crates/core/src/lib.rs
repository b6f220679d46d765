//! Concept-based explanations for a small diabetic-retinopathy grading
//! network: concept activation vectors with significance-tested TCAV scores,
//! and sequential concept bottleneck models with test-time intervention, all
//! trained on a synthetic fundus-like dataset with planted findings.

pub mod cavlib;
pub mod cbm;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod tcav;
pub mod tinynet;

pub use error::{Error, Result};
