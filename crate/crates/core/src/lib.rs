//! Tactile localization of a known rigid object.
//!
//! A query contact shape (the patch of the object pressed into a flat tactile
//! sensor, as a clamped depth image) is matched against a dense grid of
//! pre-rendered contact poses. Similarity scores become a posterior over the
//! grid, several simultaneous contacts are fused in log space, and the most
//! likely poses can be refined by rigid point-set registration.
//!
//! Module map:
//! - [`geometry`]: poses, meshes, point clouds, surface sampling
//! - [`render`]: depth and contact-shape rendering, image formats
//! - [`grid`]: pose grids, pose distance, nearest-pose search, grid files
//! - [`similarity`]: descriptors, scoring and contrastive training
//! - [`posterior`]: single-contact posteriors, multi-contact fusion
//! - [`registration`]: EM rigid registration and pose refinement
//! - [`evaluation`]: synthetic queries, metrics and experiment protocols

pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod posterior;
pub mod registration;
pub mod render;
pub mod rng;
pub mod similarity;

pub use error::{Error, ErrorClass, Result};
pub use geometry::{PointCloud, Pose, TriangleMesh};
pub use render::{ContactShape, MeshRenderer, SensorModel};
