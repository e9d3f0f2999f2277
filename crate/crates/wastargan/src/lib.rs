//! Many-to-many non-parallel voice conversion with a speaker encoder and
//! weight adaptive instance normalization, plus the feature pipeline,
//! training loop, and objective evaluation harness around it.

pub mod audio;
pub mod config;
pub mod container;
pub mod convert;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod models;
pub mod nn;
pub mod parallel;
pub mod training;

pub use error::{Error, Result};
