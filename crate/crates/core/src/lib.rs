//! Multi-task self-supervised fine-tuning for multiple-choice commonsense QA.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod taskgen;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
