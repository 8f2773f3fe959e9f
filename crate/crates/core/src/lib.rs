//! Radiance fields for dynamic objects over mesh-intrinsic coordinates.
//!
//! Given a sequence of proxy meshes with shared topology and a shared UV
//! atlas plus posed images, this crate maps sample points to UV-D (or XYZ-D)
//! coordinates of their nearest proxy-surface points, feeds them through a
//! multi-resolution hash encoding into small MLPs, and volume-renders the
//! result. A synthetic deforming-scene generator with an independent
//! analytic oracle provides desk-scale ground truth end to end.

pub mod checkpoint;
pub mod dataset;
pub mod encoding;
pub mod field;
pub mod geom;
pub mod img;
pub mod intrinsic;
pub mod mesh;
pub mod metrics;
pub mod mlp;
pub mod renderer;
pub mod spatial;
pub mod synth;
pub mod training;
pub mod config;
