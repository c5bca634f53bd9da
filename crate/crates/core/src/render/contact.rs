use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose, TriangleMesh};
use crate::render::bvh::{Bvh, Ray};
use crate::render::SensorModel;

/// Tolerance on the minimal depth of a contact pose, mm.
pub const CONTACT_TOL: f64 = 1e-6;

/// Per-pixel z depth in mm; `f64::INFINITY` where the ray misses.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn min_depth(&self) -> Option<f64> {
        self.depth.iter().copied().filter(|d| d.is_finite()).min_by(f64::total_cmp)
    }
}

/// Clamped penetration image: `value = min(depth - d, delta_d)`; `delta_d`
/// marks no contact.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactShape {
    pub width: usize,
    pub height: usize,
    pub delta_d: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn at(&self, u: usize, v: usize) -> bool {
        self.bits[v * self.width + u]
    }

    /// Fraction of pixels where two equally sized masks disagree.
    pub fn mismatch_fraction(&self, other: &Mask) -> f64 {
        assert_eq!(self.bits.len(), other.bits.len(), "mask size mismatch");
        let diff = self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count();
        diff as f64 / self.bits.len() as f64
    }
}

impl ContactShape {
    /// All-no-contact image.
    pub fn empty(width: usize, height: usize, delta_d: f64) -> Self {
        ContactShape { width, height, delta_d, values: vec![delta_d; width * height] }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn is_contact(&self, i: usize) -> bool {
        self.values[i] < self.delta_d
    }

    pub fn contact_count(&self) -> usize {
        (0..self.values.len()).filter(|&i| self.is_contact(i)).count()
    }

    pub fn has_contact(&self) -> bool {
        (0..self.values.len()).any(|i| self.is_contact(i))
    }

    pub fn to_mask(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: (0..self.values.len()).map(|i| self.is_contact(i)).collect(),
        }
    }

    /// Back-projects contact pixels to camera-frame points at depth `d + value`.
    pub fn to_pointcloud(&self, sensor: &SensorModel) -> Result<PointCloud> {
        self.check_size(sensor)?;
        let mut points = Vec::new();
        for v in 0..self.height {
            for u in 0..self.width {
                let i = v * self.width + u;
                if self.is_contact(i) {
                    points.push(sensor.ray(u, v) * (sensor.d + self.values[i]));
                }
            }
        }
        if points.is_empty() {
            return Err(Error::EmptyContact);
        }
        Ok(PointCloud::new(points))
    }

    /// Snaps values onto the 16-bit lattice used by the on-disk formats,
    /// keeping every contact pixel in contact.
    pub fn quantized(&self) -> ContactShape {
        ContactShape {
            values: self
                .values
                .iter()
                .map(|&v| dequantize(quantize(v, self.delta_d), self.delta_d))
                .collect(),
            ..self.clone()
        }
    }

    /// Same contact pixels with no-contact pixels forced wherever `window` is false.
    pub fn masked(&self, window: &Mask) -> Result<ContactShape> {
        if window.width != self.width || window.height != self.height {
            return Err(Error::InvalidInput("window mask size differs from contact shape".into()));
        }
        let mut out = self.clone();
        for (v, &keep) in out.values.iter_mut().zip(&window.bits) {
            if !keep {
                *v = self.delta_d;
            }
        }
        Ok(out)
    }

    pub(crate) fn check_size(&self, sensor: &SensorModel) -> Result<()> {
        if self.width != sensor.width || self.height != sensor.height {
            return Err(Error::InvalidInput(format!(
                "contact shape is {}x{} but sensor is {}x{}",
                self.width, self.height, sensor.width, sensor.height
            )));
        }
        Ok(())
    }
}

pub const NO_CONTACT_CODE: u16 = u16::MAX;

/// `round(value / delta_d * 65535)`, with contact values capped below the
/// no-contact code.
#[inline]
pub fn quantize(value: f64, delta_d: f64) -> u16 {
    if !(value < delta_d) {
        return NO_CONTACT_CODE;
    }
    let code = (value.max(0.0) / delta_d * 65535.0).round();
    code.min(65534.0) as u16
}

#[inline]
pub fn dequantize(code: u16, delta_d: f64) -> f64 {
    code as f64 / 65535.0 * delta_d
}

/// Renders depth and contact images of one mesh under many poses. The
/// hierarchy is built once in the object frame and rays are moved into it.
#[derive(Debug, Clone)]
pub struct MeshRenderer {
    mesh: TriangleMesh,
    bvh: Bvh,
}

impl MeshRenderer {
    pub fn new(mesh: &TriangleMesh) -> Self {
        MeshRenderer { mesh: mesh.clone(), bvh: Bvh::build(mesh) }
    }

    pub fn mesh(&self) -> &TriangleMesh {
        &self.mesh
    }

    fn object_ray(&self, inv: &Pose, origin: &Vector3<f64>, dir_cam: Vector3<f64>) -> Ray {
        Ray { origin: *origin, dir: inv.rotation() * dir_cam }
    }

    /// Nearest hit depth for every pixel (pinhole rays from the origin).
    pub fn render_depth(&self, pose: &Pose, sensor: &SensorModel) -> DepthImage {
        let inv = pose.inverse();
        let origin = *inv.translation();
        let w = sensor.width;
        let depth: Vec<f64> = (0..sensor.height)
            .into_par_iter()
            .flat_map_iter(|v| {
                let inv = &inv;
                (0..w).map(move |u| {
                    let ray = self.object_ray(inv, &origin, sensor.ray(u, v));
                    self.bvh.intersect(&ray, 0.0, f64::INFINITY).unwrap_or(f64::INFINITY)
                })
            })
            .collect();
        DepthImage { width: w, height: sensor.height, depth }
    }

    /// Minimum z over surface points whose (x, y) lies inside the sensor
    /// rectangle, found by clipping every triangle to the rectangle's prism.
    pub fn min_z_in_window(&self, pose: &Pose, sensor: &SensorModel) -> Option<f64> {
        let verts: Vec<Vector3<f64>> = self.mesh.vertices().iter().map(|v| pose.transform_point(v)).collect();
        let (hx, hy) = (sensor.half_extent_x, sensor.half_extent_y);
        let mut best = f64::INFINITY;
        let mut poly = Vec::with_capacity(8);
        let mut scratch = Vec::with_capacity(8);
        for t in self.mesh.triangles() {
            let tri = [verts[t[0] as usize], verts[t[1] as usize], verts[t[2] as usize]];
            let (mut xlo, mut xhi, mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            let mut zmin = f64::INFINITY;
            for p in &tri {
                xlo = xlo.min(p.x);
                xhi = xhi.max(p.x);
                ylo = ylo.min(p.y);
                yhi = yhi.max(p.y);
                zmin = zmin.min(p.z);
            }
            if xhi < -hx || xlo > hx || yhi < -hy || ylo > hy || zmin >= best {
                continue;
            }
            if xlo >= -hx && xhi <= hx && ylo >= -hy && yhi <= hy {
                best = best.min(zmin);
                continue;
            }
            poly.clear();
            poly.extend_from_slice(&tri);
            for (axis, sign, bound) in [(0, 1.0, hx), (0, -1.0, hx), (1, 1.0, hy), (1, -1.0, hy)] {
                clip_polygon(&poly, &mut scratch, |p: &Vector3<f64>| bound - sign * p[axis]);
                std::mem::swap(&mut poly, &mut scratch);
                if poly.is_empty() {
                    break;
                }
            }
            for p in &poly {
                best = best.min(p.z);
            }
        }
        best.is_finite().then_some(best)
    }

    /// Signed distance of the closest in-window surface point from the sensor plane.
    pub fn contact_gap(&self, pose: &Pose, sensor: &SensorModel) -> Option<f64> {
        self.min_z_in_window(pose, sensor).map(|z| z - sensor.d)
    }

    /// Translates the pose along z so the closest in-window surface point sits
    /// on the sensor plane. Returns the contact pose and the applied shift.
    pub fn project_to_contact(&self, pose: &Pose, sensor: &SensorModel) -> Result<(Pose, f64)> {
        let min_z = self.min_z_in_window(pose, sensor).ok_or(Error::NoContactPossible)?;
        let tz = sensor.d - min_z;
        Ok((pose.shifted_z(tz), tz))
    }

    /// Contact shape of a contact pose. `delta_d_override` replaces the
    /// sensor's threshold.
    pub fn render_contact_shape(
        &self,
        pose: &Pose,
        sensor: &SensorModel,
        delta_d_override: Option<f64>,
    ) -> Result<ContactShape> {
        let delta_d = delta_d_override.unwrap_or(sensor.delta_d);
        if !(delta_d.is_finite() && delta_d > 0.0) {
            return Err(Error::InvalidInput(format!("contact threshold must be positive, got {delta_d}")));
        }
        let gap = self.contact_gap(pose, sensor).ok_or(Error::NoContactPossible)?;
        if gap.abs() > CONTACT_TOL {
            return Err(Error::NotInContact { min_depth: sensor.d + gap, d: sensor.d });
        }
        let z_max = sensor.d + delta_d;
        let mut shape = ContactShape::empty(sensor.width, sensor.height, delta_d);
        let Some((u0, u1, v0, v1)) = self.pixel_bounds(pose, sensor, z_max) else {
            return Ok(shape);
        };
        let inv = pose.inverse();
        let origin = *inv.translation();
        let w = sensor.width;
        let rows: Vec<(usize, Vec<f64>)> = (v0..=v1)
            .into_par_iter()
            .map(|v| {
                let row = (u0..=u1)
                    .map(|u| {
                        if !sensor.pixel_in_window(u, v) {
                            return delta_d;
                        }
                        let ray = self.object_ray(&inv, &origin, sensor.ray(u, v));
                        match self.bvh.intersect(&ray, 0.0, z_max) {
                            Some(t) => (t - sensor.d).clamp(0.0, delta_d),
                            None => delta_d,
                        }
                    })
                    .collect();
                (v, row)
            })
            .collect();
        for (v, row) in rows {
            shape.values[v * w + u0..=v * w + u1].copy_from_slice(&row);
        }
        Ok(shape)
    }

    /// Pixel rectangle that contains the projection of every surface point with
    /// depth at most `z_max`.
    fn pixel_bounds(&self, pose: &Pose, sensor: &SensorModel, z_max: f64) -> Option<(usize, usize, usize, usize)> {
        const Z_NEAR: f64 = 1e-3;
        let verts: Vec<Vector3<f64>> = self.mesh.vertices().iter().map(|v| pose.transform_point(v)).collect();
        let (mut ulo, mut uhi, mut vlo, mut vhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        let mut poly = Vec::with_capacity(6);
        let mut scratch = Vec::with_capacity(6);
        for t in self.mesh.triangles() {
            let tri = [verts[t[0] as usize], verts[t[1] as usize], verts[t[2] as usize]];
            if tri.iter().all(|p| p.z > z_max) {
                continue;
            }
            poly.clear();
            poly.extend_from_slice(&tri);
            clip_polygon(&poly, &mut scratch, |p: &Vector3<f64>| z_max - p.z);
            std::mem::swap(&mut poly, &mut scratch);
            clip_polygon(&poly, &mut scratch, |p: &Vector3<f64>| p.z - Z_NEAR);
            std::mem::swap(&mut poly, &mut scratch);
            for p in &poly {
                let (u, v) = sensor.project(p);
                ulo = ulo.min(u);
                uhi = uhi.max(u);
                vlo = vlo.min(v);
                vhi = vhi.max(v);
            }
        }
        if !ulo.is_finite() {
            return None;
        }
        let clamp = |x: f64, n: usize| x.max(0.0).min((n - 1) as f64);
        if uhi < 0.0 || vhi < 0.0 || ulo > (sensor.width - 1) as f64 || vlo > (sensor.height - 1) as f64 {
            return None;
        }
        let u0 = clamp(ulo.floor() - 1.0, sensor.width) as usize;
        let u1 = clamp(uhi.ceil() + 1.0, sensor.width) as usize;
        let v0 = clamp(vlo.floor() - 1.0, sensor.height) as usize;
        let v1 = clamp(vhi.ceil() + 1.0, sensor.height) as usize;
        Some((u0, u1, v0, v1))
    }
}

/// Sutherland–Hodgman against the half-space `f(p) >= 0`.
fn clip_polygon<F: Fn(&Vector3<f64>) -> f64>(input: &[Vector3<f64>], out: &mut Vec<Vector3<f64>>, f: F) {
    out.clear();
    let n = input.len();
    for i in 0..n {
        let a = input[i];
        let b = input[(i + 1) % n];
        let fa = f(&a);
        let fb = f(&b);
        if fa >= 0.0 {
            out.push(a);
        }
        if (fa >= 0.0) != (fb >= 0.0) {
            let s = fa / (fa - fb);
            out.push(a + (b - a) * s);
        }
    }
}

/// Depth image of `mesh` under `pose`.
pub fn render_depth(mesh: &TriangleMesh, pose: &Pose, sensor: &SensorModel) -> DepthImage {
    MeshRenderer::new(mesh).render_depth(pose, sensor)
}

pub fn project_to_contact(mesh: &TriangleMesh, pose: &Pose, sensor: &SensorModel) -> Result<(Pose, f64)> {
    MeshRenderer::new(mesh).project_to_contact(pose, sensor)
}

pub fn render_contact_shape(
    mesh: &TriangleMesh,
    pose: &Pose,
    sensor: &SensorModel,
    delta_d_override: Option<f64>,
) -> Result<ContactShape> {
    MeshRenderer::new(mesh).render_contact_shape(pose, sensor, delta_d_override)
}

/// Area-weighted mean resize of a row-major image.
pub fn area_mean_resize(values: &[f64], width: usize, height: usize, new_width: usize, new_height: usize) -> Vec<f64> {
    let wx = resize_weights(width, new_width);
    let wy = resize_weights(height, new_height);
    let mut out = vec![0.0; new_width * new_height];
    for (j, row_w) in wy.iter().enumerate() {
        for (i, col_w) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, a) in row_w {
                for &(x, b) in col_w {
                    acc += a * b * values[y * width + x];
                }
            }
            out[j * new_width + i] = acc;
        }
    }
    out
}

/// For every output cell, the source cells it overlaps and their normalized weights.
pub(crate) fn resize_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = lo + scale;
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}
