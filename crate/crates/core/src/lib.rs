//! Multimodal semantic fusion for LiDAR perception.

pub mod aaf;
pub mod checkpoint;
pub mod dff;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod numerics;
pub mod pipeline;
pub mod semantics;
pub mod synth;
pub mod voxelizer;

pub use error::{Error, Result};
