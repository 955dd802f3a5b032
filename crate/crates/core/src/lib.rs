//! Underwater image formation and inversion.
//!
//! * [`refraction`]: flat-port ray generation and radial rectification.
//! * [`scene`]: voxel object fields and ray sampling.
//! * [`render`]: absorption/back-scatter compositing and novel-view synthesis.
//! * [`raster`]: linear RGB buffers, brightness compensation, gamma 2.4.
//! * [`loss`] and [`optim`]: losses and projected gradient descent for the
//!   medium parameters and, jointly, the voxel field.
//! * [`io`] and [`manifest`]: PFM/PNG/CSV files and experiment manifests.

pub mod error;
pub mod io;
pub mod loss;
pub mod manifest;
pub mod optim;
pub mod raster;
pub mod refraction;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
pub use optim::{CaptureSet, LossBreakdown, OptimConfig};
pub use raster::{ImageBuffer, Rgb};
pub use refraction::{CameraModel, Pose, Ray};
pub use render::{MediumBounds, MediumParams, RenderMode, RenderSettings};
pub use scene::{RaySamples, SamplingConfig, SceneSpec, VoxelScene};

pub use nalgebra::{Vector2, Vector3};
