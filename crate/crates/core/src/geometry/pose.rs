use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

const ORTHO_TOL: f64 = 1e-9;
const QUAT_TOL: f64 = 1e-6;

/// Rigid transform `x -> R x + t`, translation in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix, re-orthonormalizing it when its
    /// determinant has drifted from +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: orthonormalize(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = if axis.norm() == 0.0 || angle == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
        };
        Pose::new(rot, translation)
    }

    /// Quaternion `(w, x, y, z)`. Non-unit input is normalized; a norm that is
    /// off by more than the ingestion tolerance is logged.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidInput(format!("degenerate quaternion {q:?}")));
        }
        if (norm - 1.0).abs() > QUAT_TOL {
            log::warn!("quaternion norm {norm} normalized on ingestion");
        }
        let unit = UnitQuaternion::from_quaternion(quat);
        Ok(Pose::new(*unit.to_rotation_matrix().matrix(), translation))
    }

    /// Returns `(w, x, y, z)` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut out = [q.w, q.i, q.j, q.k];
        if out[0] < 0.0 {
            out.iter_mut().for_each(|v| *v = -*v);
        }
        out
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(cloud.points().iter().map(|p| self.transform_point(p)).collect())
    }

    /// Pose translated along the camera z axis.
    pub fn shifted_z(&self, dz: f64) -> Pose {
        let mut out = *self;
        out.translation.z += dz;
        out
    }

    /// Rotation angle of `self⁻¹ ∘ other` in radians.
    pub fn angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Flattened row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t.x, t.y, t.z,
        ]
    }

    /// Inverse of [`Pose::to_array`]. Values are taken as-is when the rotation
    /// is already orthonormal so that stored poses round-trip bit-exactly.
    pub fn from_array(a: &[f64; 12]) -> Pose {
        let rotation = Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]);
        Pose::new(rotation, Vector3::new(a[9], a[10], a[11]))
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Gram-Schmidt on the columns, only when the determinant is off by more than
/// the orthonormality tolerance.
fn orthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let det = m.determinant();
    let gram = m.transpose() * m;
    let off = (gram - Matrix3::identity()).abs().max();
    if (det - 1.0).abs() <= ORTHO_TOL && off <= ORTHO_TOL {
        return m;
    }
    let c0 = m.column(0).into_owned();
    let c1 = m.column(1).into_owned();
    let x = c0.normalize();
    let y = (c1 - x * x.dot(&c1)).normalize();
    let z = x.cross(&y);
    Matrix3::from_columns(&[x, y, z])
}

/// Serialized pose: translation in mm and a `(w, x, y, z)` quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    pub quaternion: [f64; 4],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let t = p.translation();
        PoseRecord {
            translation: [t.x, t.y, t.z],
            quaternion: p.quaternion(),
        }
    }
}

impl TryFrom<PoseRecord> for Pose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        Pose::from_quaternion(r.quaternion, Vector3::from(r.translation))
    }
}
