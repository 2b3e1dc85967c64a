//! Range-view LiDAR semantic segmentation.
//!
//! The pipeline projects a scan onto a beam × azimuth grid, encodes each
//! point relative to its cell's centroid, runs a multi-branch convolutional
//! backbone interleaved with depth-guided point/image attention, and fuses
//! all stages into per-point class scores. Everything runs on a small
//! built-in tensor library with hand-written gradients that are verified by
//! finite differences.

pub mod backbone;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod projection;
pub mod scan_io;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
