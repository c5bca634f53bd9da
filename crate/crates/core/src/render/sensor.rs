use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Virtual pinhole camera at the origin looking down +z, with the sensing
/// rectangle on the plane `z = d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera to sensor-plane distance, mm.
    pub d: f64,
    /// Contact depth threshold, mm.
    pub delta_d: f64,
    /// Half-widths of the sensing rectangle on `z = d`, mm.
    pub half_extent_x: f64,
    pub half_extent_y: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel::native()
    }
}

pub const NATIVE_RESOLUTION: usize = 470;
pub const WORK_RESOLUTION: usize = 200;

impl SensorModel {
    /// GelSlim-like sensor at its native 470 x 470 render resolution.
    pub fn native() -> Self {
        let (fx, fy, cx, cy, d) = (291.5, 289.0, 235.0, 235.0, 25.0);
        let w = NATIVE_RESOLUTION;
        let h = NATIVE_RESOLUTION;
        SensorModel {
            fx,
            fy,
            cx,
            cy,
            width: w,
            height: h,
            d,
            delta_d: 2.0,
            half_extent_x: cx.min(w as f64 - 1.0 - cx) / fx * d,
            half_extent_y: cy.min(h as f64 - 1.0 - cy) / fy * d,
        }
    }

    /// Native sensor rescaled to the 200 x 200 working resolution.
    pub fn work() -> Self {
        SensorModel::native().rescaled(WORK_RESOLUTION, WORK_RESOLUTION)
    }

    /// Same physical sensor sampled at another resolution. Pixel `i` covers
    /// `[i - 0.5, i + 0.5)`, so intrinsics map as in an area-mean resize.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        SensorModel {
            fx: self.fx / sx,
            fy: self.fy / sy,
            cx: (self.cx + 0.5) / sx - 0.5,
            cy: (self.cy + 0.5) / sy - 0.5,
            width,
            height,
            ..*self
        }
    }

    pub fn with_delta_d(&self, delta_d: f64) -> Self {
        SensorModel { delta_d, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.fx, self.fy, self.d, self.delta_d, self.half_extent_x, self.half_extent_y];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "sensor focal lengths, d, delta_d and extents must be positive: {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::InvalidConfig("sensor resolution must be in 1..=65535".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidConfig("principal point must be finite".into()));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray direction through pixel `(u, v)`, scaled so that its z component is 1.
    #[inline]
    pub fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new((u as f64 - self.cx) / self.fx, (v as f64 - self.cy) / self.fy, 1.0)
    }

    /// Continuous pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    #[inline]
    pub fn in_window(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_extent_x && y.abs() <= self.half_extent_y
    }

    /// Whether the ray through `(u, v)` crosses the sensor plane inside the rectangle.
    #[inline]
    pub fn pixel_in_window(&self, u: usize, v: usize) -> bool {
        let r = self.ray(u, v);
        self.in_window(r.x * self.d, r.y * self.d)
    }
}
