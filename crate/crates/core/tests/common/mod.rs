#![allow(dead_code)]

use nalgebra::Vector3;
use touchloc::{SensorModel, TriangleMesh};

/// Depth (z) where the ray through pixel `(u, v)` first meets the sphere.
pub fn ray_sphere_depth(sensor: &SensorModel, u: usize, v: usize, center: &Vector3<f64>, radius: f64) -> Option<f64> {
    let r = sensor.ray(u, v);
    let rr = r.norm_squared();
    let rc = r.dot(center);
    let disc = rc * rc - rr * (center.norm_squared() - radius * radius);
    (disc >= 0.0).then(|| (rc - disc.sqrt()) / rr)
}

/// Sphere cap triangulated with one vertex on every pixel ray that hits it,
/// so depths at pixel centres are exact. Covers pixels within `max_px` of the
/// principal point.
pub fn sphere_heightfield(sensor: &SensorModel, center: &Vector3<f64>, radius: f64, max_px: f64) -> TriangleMesh {
    let (w, h) = (sensor.width, sensor.height);
    let mut index = vec![u32::MAX; w * h];
    let mut vertices = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let (du, dv) = (u as f64 - sensor.cx, v as f64 - sensor.cy);
            if du.hypot(dv) > max_px {
                continue;
            }
            if let Some(z) = ray_sphere_depth(sensor, u, v, center, radius) {
                index[v * w + u] = vertices.len() as u32;
                vertices.push(sensor.ray(u, v) * z);
            }
        }
    }
    let mut triangles = Vec::new();
    for v in 0..h - 1 {
        for u in 0..w - 1 {
            let q = [index[v * w + u], index[v * w + u + 1], index[(v + 1) * w + u + 1], index[(v + 1) * w + u]];
            if q.iter().all(|&i| i != u32::MAX) {
                triangles.push([q[0], q[1], q[2]]);
                triangles.push([q[0], q[2], q[3]]);
            }
        }
    }
    TriangleMesh::new(vertices, triangles).expect("heightfield has triangles")
}
