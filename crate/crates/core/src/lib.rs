//! Single-frame 2D-to-3D keypoint lifting.
//!
//! The pipeline masks, centers and scales 2D keypoints, encodes each token
//! from its own coordinates with frozen random Fourier features, runs a
//! stack of hybrid graph/self-attention layers, decodes a canonical 3D shape
//! per token and aligns it to a reference with a masked Procrustes solve.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod keypoints;
mod kv;
pub mod model;
pub mod procrustes;
pub mod tpe;
pub mod train;

pub use error::{Error, Result};
