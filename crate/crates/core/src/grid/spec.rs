use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::render::{MeshRenderer, SensorModel};

/// Declared rotational symmetry of the object about its origin.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Symmetry {
    #[default]
    None,
    /// Every rotation is equivalent (e.g. a sphere centred at the origin).
    Full,
    /// Finite rotation group, row-major matrices. Identity is implied.
    Group { rotations: Vec<[[f64; 3]; 3]> },
}

/// Parameter ranges of a pose grid: in-plane translation of the object origin,
/// the object direction that faces the sensor, and the roll about the camera
/// axis. Depth follows from the contact condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub x_step: f64,
    pub y_step: f64,
    pub n_view_dirs: usize,
    pub n_rolls: usize,
    /// Object-frame direction that points at the camera for the central view.
    #[serde(default = "default_view_center")]
    pub view_center: [f64; 3],
    /// Half-angle of the cone of view directions, degrees (180 = whole sphere).
    #[serde(default = "default_view_cone")]
    pub view_cone_deg: f64,
    #[serde(default)]
    pub symmetry: Symmetry,
    /// Seed of the cached surface samples used for pose distances.
    #[serde(default)]
    pub seed: u64,
}

fn default_view_center() -> [f64; 3] {
    [0.0, 0.0, -1.0]
}

fn default_view_cone() -> f64 {
    180.0
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("grid spec: {m}")));
        if !(self.x_step > 0.0 && self.y_step > 0.0) {
            return bad("steps must be positive");
        }
        if self.x_range[0] > self.x_range[1] || self.y_range[0] > self.y_range[1] {
            return bad("ranges must be ordered");
        }
        if self.n_view_dirs == 0 || self.n_rolls == 0 {
            return bad("n_view_dirs and n_rolls must be at least 1");
        }
        if !(self.view_cone_deg > 0.0 && self.view_cone_deg <= 180.0) {
            return bad("view_cone_deg must be in (0, 180]");
        }
        if Vector3::from(self.view_center).norm() < 1e-9 {
            return bad("view_center must be non-zero");
        }
        if let Symmetry::Group { rotations } = &self.symmetry {
            for r in rotations {
                let m = matrix_from_rows(r);
                if ((m.transpose() * m) - Matrix3::identity()).abs().max() > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
                    return bad("symmetry group entries must be proper rotations");
                }
            }
        }
        Ok(())
    }

    pub fn xs(&self) -> Vec<f64> {
        axis_values(self.x_range, self.x_step)
    }

    pub fn ys(&self) -> Vec<f64> {
        axis_values(self.y_range, self.y_step)
    }

    fn center(&self) -> Unit<Vector3<f64>> {
        Unit::new_normalize(Vector3::from(self.view_center))
    }

    /// Fibonacci lattice on the spherical cap around `view_center`.
    pub fn view_dirs(&self) -> Vec<Vector3<f64>> {
        let c = self.center();
        if self.n_view_dirs == 1 {
            return vec![c.into_inner()];
        }
        let cos_max = self.view_cone_deg.to_radians().cos();
        let to_center = rotation_z_to(&c);
        (0..self.n_view_dirs)
            .map(|i| {
                let cos_t = 1.0 - (1.0 - cos_max) * (i as f64 + 0.5) / self.n_view_dirs as f64;
                let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
                let phi = i as f64 * GOLDEN_ANGLE;
                to_center * Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t)
            })
            .collect()
    }

    pub fn rolls(&self) -> Vec<f64> {
        (0..self.n_rolls).map(|k| 2.0 * PI * k as f64 / self.n_rolls as f64).collect()
    }

    /// Uniformly random rotation from the spec's continuous parameter space.
    pub fn sample_rotation<R: Rng + ?Sized>(&self, rng: &mut R) -> Matrix3<f64> {
        let c = self.center();
        let cos_max = self.view_cone_deg.to_radians().cos();
        let cos_t = 1.0 - (1.0 - cos_max) * rng.random::<f64>();
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = 2.0 * PI * rng.random::<f64>();
        let dir = rotation_z_to(&c) * Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
        let roll = 2.0 * PI * rng.random::<f64>();
        view_rotation(&dir, roll)
    }
}

fn axis_values(range: [f64; 2], step: f64) -> Vec<f64> {
    let n = ((range[1] - range[0]) / step + 1e-9).floor() as usize + 1;
    (0..n).map(|k| range[0] + k as f64 * step).collect()
}

pub(crate) fn matrix_from_rows(r: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2])
}

/// Rotation taking +z to `c`.
fn rotation_z_to(c: &Unit<Vector3<f64>>) -> Rotation3<f64> {
    Rotation3::rotation_between(&Vector3::z(), c).unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), PI))
}

/// Object rotation for which the object-frame direction `dir` points at the
/// camera (`-z`), followed by `roll` about the camera axis.
pub fn view_rotation(dir: &Vector3<f64>, roll: f64) -> Matrix3<f64> {
    let target = -Vector3::z();
    let align = Rotation3::rotation_between(dir, &target)
        .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), PI));
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), roll) * align;
    *r.matrix()
}

/// Lexicographic comparison of flattened matrices with a small tolerance.
fn lex_less(a: &Matrix3<f64>, b: &Matrix3<f64>) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let (x, y) = (a[(i, j)], b[(i, j)]);
            if (x - y).abs() > 1e-9 {
                return x < y;
            }
        }
    }
    false
}

impl Symmetry {
    /// Canonical representative of the orbit `{ R S : S in group }`.
    pub fn canonicalize(&self, r: &Matrix3<f64>) -> Matrix3<f64> {
        match self {
            Symmetry::None => *r,
            Symmetry::Full => Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)),
            Symmetry::Group { rotations } => {
                let mut best = *r;
                for s in rotations {
                    let cand = r * matrix_from_rows(s);
                    if lex_less(&cand, &best) {
                        best = cand;
                    }
                }
                best
            }
        }
    }
}

/// Draws a contact pose uniformly from the spec's continuous parameter space
/// (retrying draws whose object cannot reach the sensor window).
pub fn sample_contact_pose<R: Rng + ?Sized>(
    renderer: &MeshRenderer,
    sensor: &SensorModel,
    spec: &GridSpec,
    rng: &mut R,
) -> Result<Pose> {
    let z0 = sensor.d + renderer.mesh().radius_about_origin() + 1.0;
    for _ in 0..1000 {
        let x = spec.x_range[0] + (spec.x_range[1] - spec.x_range[0]) * rng.random::<f64>();
        let y = spec.y_range[0] + (spec.y_range[1] - spec.y_range[0]) * rng.random::<f64>();
        let rot = spec.sample_rotation(rng);
        let pose = Pose::new(rot, Vector3::new(x, y, z0));
        if let Ok((contact, _)) = renderer.project_to_contact(&pose, sensor) {
            return Ok(contact);
        }
    }
    Err(Error::NoContactPossible)
}
