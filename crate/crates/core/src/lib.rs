//! Animatable 3D Gaussian avatars whose non-rigid deformation is conditioned on
//! a hierarchical motion context: skeleton pose residuals plus per-vertex
//! velocities, sampled at several temporal strides.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: rotations, pinhole cameras, linear blend skinning.
//! * [`body`]: a procedural articulated body (template vertices, skinning
//!   weights, joint tree) and forward kinematics.
//! * [`motion`]: stride schedules, pose residual sequences, vertex velocity
//!   fields and nearest-vertex gathering.
//! * [`gaussians`]: canonical Gaussian primitives, covariances, densification.
//! * [`nets`]: small dense networks with hand-written reverse mode and the
//!   task networks of the deformation stack.
//! * [`raster`]: rigid warp, splat projection, tile rasterizer, brute-force
//!   reference renderer and the analytic backward pass.
//! * [`pipeline`]: the full differentiable forward/backward for one view.
//! * [`train`]: losses, metrics, Adam, checkpoints, the training loop and
//!   evaluation.
//! * [`datagen`]: deterministic synthetic multi-view datasets.
//! * [`gradcheck`]: finite-difference suites shared by the CLI and tests.
//! * [`cli`]: the command-line front end.

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub mod body;
pub mod cli;
pub mod datagen;
pub mod gaussians;
pub mod geometry;
pub mod gradcheck;
pub mod image_io;
pub mod motion;
pub mod nets;
pub mod pipeline;
pub mod raster;
pub mod train;

mod blob;

pub use body::{BodyRecipe, BodyTemplate, Pose};
pub use gaussians::GaussianSet;
pub use geometry::{BoneTransform, Camera, Mat3, Quat, Vec3};
