//! Geometric contact rendering: a pinhole depth camera behind a flat sensor
//! plane, with contact defined as the band `[d, d + delta_d]` of depths.

mod bvh;
mod contact;
mod pgm;
mod sensor;

pub use bvh::{intersect_brute_force, Bvh, Ray};
pub use contact::{
    area_mean_resize, dequantize, project_to_contact, quantize, render_contact_shape, render_depth,
    ContactShape, DepthImage, Mask, MeshRenderer, CONTACT_TOL, NO_CONTACT_CODE,
};
pub use pgm::{
    contact_shape_from_pgm, contact_shape_to_pgm, decode_pgm16, encode_pgm16, read_contact_shape,
    sidecar_path, write_contact_shape, ContactShapeMeta, PackedShape,
};
pub use sensor::{SensorModel, NATIVE_RESOLUTION, WORK_RESOLUTION};
