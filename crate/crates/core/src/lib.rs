//! Time-aware recommendation with multi-granularity periodic time encoding
//! and time-based attention over recent interactions.

pub mod calendar;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
