//! Video quality assessment for surgical and endoscopic footage: synthetic
//! distortions, a small residual network trained from scratch, frame-level
//! quality prediction and learned temporal pooling.

pub mod distort;
pub mod eval;
mod error;
pub mod media;
pub mod models;
pub mod nn;
pub mod pooling;
pub mod train;
mod noise;

pub use error::{Error, Result};
