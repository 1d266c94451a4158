//! Hole-free, temporally consistent reconstruction of non-rigid mesh sequences.
//!
//! The pipeline runs in four stages over a sequence of partial frames:
//!
//! 1. [`registration`]: every frame is registered onto its neighbours with an
//!    embedded deformation graph, solving forward and backward motions jointly
//!    with a temporal coupling term.
//! 2. [`fusion`]: the pairwise motions are chained and refined so every frame is
//!    expressed in a common reference pose, and the aligned partial surfaces are
//!    fused into one closed template mesh.
//! 3. [`segmentation`]: the template is split into near-rigid patches using
//!    K-means over the aligned graph nodes followed by Potts alpha-expansion.
//! 4. [`warping`]: the template is expanded onto each aligned frame, patch
//!    motions are estimated (with geodesic fallback where the frame has holes),
//!    refined jointly over time and used to warp the template back to every
//!    frame.
//!
//! [`synth`] generates articulated ground-truth sequences with scripted
//! occlusion, and [`pipeline`] drives the stages end to end with checkpoints.

pub mod deform;
pub mod error;
pub mod fusion;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod pipeline;
pub mod registration;
pub mod segmentation;
pub mod solver;
pub mod synth;
pub mod terms;
pub mod warping;

pub use error::{Error, Result};

/// 3D vector in world units.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix.
pub type Mat3 = nalgebra::Matrix3<f64>;
