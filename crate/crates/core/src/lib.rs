//! Video object detection post-processing: a scale-adaptive regression
//! tracker head, the tracking-first merge of tracked and detected boxes, and
//! whole-video tubelet linking and re-scoring.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod cli;
pub mod detection;
pub mod error;
pub mod evalio;
pub mod geometry;
pub mod linker;
pub mod pipeline;
pub mod runner;
pub mod synth;
pub mod tensor;
pub mod tracker;

pub use detection::{Detection, Provenance, VideoDetectionSet};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use tensor::{FeaturePyramid, Tensor3};
