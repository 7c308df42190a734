//! Multi-view score distillation over a toy differentiable scene.
//!
//! The pipeline lifts rendered views into point clouds to transport images,
//! masks and diffusion noise between cameras, assembles explicit and
//! implicit multi-view conditions, and refines the scene with a
//! score-distillation loop in which each view's noise is resampled around
//! a geometrically transported anchor and kept only when it makes that
//! view's gradient agree better with its neighbour's. The diffusion model
//! is a closed-form Gaussian denoiser, so every gradient in the loop has an
//! exact reference.

pub mod conditioning;
mod container;
pub mod diffusion;
pub mod distillation;
pub mod error;
pub mod field;
pub mod geometry;
pub mod noise;
pub mod scene;
pub mod seed;
pub mod views;

pub use diffusion::{GaussianImageModel, LatentMap, NoiseSchedule};
pub use error::{Error, Result};
pub use field::FieldStack;
pub use geometry::{CameraView, ColoredPointCloud, WarpResult};
pub use noise::{AnchorNoiseSet, ViewAnchor};
pub use scene::{RenderOptions, RenderOutput, SceneParams, ShapeSpec, TransformNet};
pub use views::{RingSpec, ViewChain};
