//! Rigid-body math, triangle meshes, point clouds and surface sampling.

mod cloud;
mod mesh;
mod pose;

pub use cloud::PointCloud;
pub use mesh::{parse_obj, parse_off, parse_stl, MeshFormat, TriangleMesh, DEGENERATE_AREA};
pub(crate) use mesh::hex16;
pub use pose::{Pose, PoseRecord};
