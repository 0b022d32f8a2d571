//! Simulation and analysis of a magnet-in-elastomer tactile sensor dragged
//! across textured surfaces, plus the feature extraction and k-NN evaluation
//! used to compare tip designs.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dsp;
pub mod error;
pub mod experiment;
pub mod features;
pub mod ingest;
pub mod learn;
pub mod magnetics;
pub mod mechanics;
pub mod plot;
pub mod surface;

pub use error::{Error, Result};
