//! Automatic moving-object labeling for multi-LiDAR driving sequences.

pub mod correction;
pub mod dataset;
pub mod detect;
pub mod edits;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod review;
pub mod sync;
pub mod synth;
pub mod tracking;
pub mod trajectory;

pub use error::{Error, Result};
