//! Dynamic scene reconstruction from posed images, with motion represented as
//! a voxel grid of Bezier-spline control points.
//!
//! The scene is a dense voxel lattice holding density, color, view-rescale,
//! rigidity, and per-vertex spline control-point offsets. Rendering bends each
//! camera ray by the spline deformation evaluated at the requested time and
//! composites the canonical radiance field along it. All gradients are
//! hand-written reverse mode, so the whole pipeline trains with Adam on plain
//! CPU threads.
//!
//! Module map:
//! - [`spline`]: Bezier curve evaluation (De Casteljau + Bernstein), exact
//!   derivatives, canonicalization of control polygons.
//! - [`field`]: the voxel grid, trilinear sampling, deformation/radiance
//!   queries, checkpoint IO, and the field-level adjoints.
//! - [`camera`] / [`renderer`]: pinhole rays, stratified sampling, volumetric
//!   ray marching forward and backward.
//! - [`loss`]: photometric MSE, offset and divergence regularizers, total
//!   variation, and their gradients.
//! - [`optim`]: Adam, the cosine learning-rate schedule, resolution warmup,
//!   and the training loop.
//! - [`data`]: D-NeRF-format dataset loading and a synthetic moving-sphere
//!   generator with an analytic ray-traced oracle.
//! - [`metrics`]: PSNR / SSIM / MS-SSIM.

pub mod camera;
pub mod data;
pub mod error;
pub mod field;
pub mod float;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod renderer;
pub mod spline;

pub use camera::{Camera, Ray};
pub use error::{Error, Result};
pub use field::{Aabb, GradBuffer, VoxelGrid};
pub use float::{real, Real};
pub use loss::{LossReport, LossWeights};
pub use math::{Mat4, Vec3};
pub use optim::{AdamState, TrainConfig};
pub use renderer::{MarchConfig, RenderOutput};
pub use spline::{CanonicalMode, ControlPolygon};

/// Single-precision aliases, the default for training and rendering.
pub type Vec3f = Vec3<f32>;
pub type GridF32 = VoxelGrid<f32>;

/// Double-precision aliases, used where gradient checks need the headroom.
pub type Vec3d = Vec3<f64>;
pub type GridF64 = VoxelGrid<f64>;
