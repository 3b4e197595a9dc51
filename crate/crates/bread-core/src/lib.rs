//! Low-light image enhancement built from four cooperating sub-networks:
//! illumination adjustment (IAN), adaptive noise suppression (ANSN), a noise
//! fusion module (NFM), and a color adaption network (CAN), plus the
//! training, evaluation, and ablation harness around them.
//!
//! Images are decomposed into YCbCr. The luminance channel is brightened by
//! a predicted relative-illumination map, denoised at a ladder of strengths,
//! and fused; the chrominance channels are regenerated under the guidance of
//! the enhanced luminance. All randomness is seeded and all operations are
//! deterministic, so training and inference are reproducible bit for bit.

pub mod can;
pub mod dataprep;
pub mod fixtures;
pub mod ian;
pub mod imagecore;
pub mod metrics;
pub mod nnkit;
pub mod noise;
pub mod pipeline;

mod error;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// The one small constant used wherever a denominator could reach zero
/// (illumination division, smoothness weights, Poisson re-brightening).
/// A single shared value keeps the loss terms and the inference path from
/// silently diverging.
pub const EPSILON: f64 = 1e-4;
