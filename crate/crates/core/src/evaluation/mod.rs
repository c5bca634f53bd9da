//! Synthetic queries, the ADD metric and the benchmark protocols.

mod experiment;
mod report;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose, TriangleMesh};
use crate::grid::{pose_distance, PoseGrid};
use crate::render::{ContactShape, MeshRenderer, SensorModel, CONTACT_TOL};
use crate::rng;

pub use experiment::{
    run_multi_contact_experiment, run_single_contact_experiment, MultiContactSetup, SingleContactSetup,
};
pub use report::{median, mean_std, ExperimentReport, Method, MethodSummary, TrialRecord};

/// Samples used for reported errors.
pub const ADD_SAMPLE_POINTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJitter {
    pub translation_sigma: f64,
    pub rotation_sigma_deg: f64,
}

/// Perturbations applied to synthetic queries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Contact threshold drawn uniformly from this interval, mm.
    pub delta_d_jitter: [f64; 2],
    pub pixel_dropout: f64,
    pub depth_noise_sigma: f64,
    pub pose_jitter: PoseJitter,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            delta_d_jitter: [1.0, 2.0],
            pixel_dropout: 0.02,
            depth_noise_sigma: 0.05,
            pose_jitter: PoseJitter { translation_sigma: 0.1, rotation_sigma_deg: 0.5 },
            seed: 0,
        }
    }
}

impl NoiseModel {
    /// No perturbation at all: queries equal plain renders at `delta_d`.
    pub fn none(delta_d: f64) -> Self {
        NoiseModel {
            delta_d_jitter: [delta_d, delta_d],
            pixel_dropout: 0.0,
            depth_noise_sigma: 0.0,
            pose_jitter: PoseJitter { translation_sigma: 0.0, rotation_sigma_deg: 0.0 },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.delta_d_jitter;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig("noise: delta_d_jitter must be 0 < lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.pixel_dropout) {
            return Err(Error::InvalidConfig("noise: pixel_dropout must be a probability".into()));
        }
        let sig = [self.depth_noise_sigma, self.pose_jitter.translation_sigma, self.pose_jitter.rotation_sigma_deg];
        if sig.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig("noise: sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

fn jitter_pose<R: Rng + ?Sized>(pose: &Pose, jitter: &PoseJitter, r: &mut R) -> Pose {
    if jitter.translation_sigma == 0.0 && jitter.rotation_sigma_deg == 0.0 {
        return *pose;
    }
    let mut gauss = |s: f64| -> Vector3<f64> {
        let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(r));
        Vector3::from(z) * s
    };
    let dt = gauss(jitter.translation_sigma);
    let w = gauss(jitter.rotation_sigma_deg.to_radians());
    let delta = Pose::from_axis_angle(w, w.norm(), Vector3::zeros());
    Pose::new(delta.rotation() * pose.rotation(), pose.translation() + dt)
}

/// Noisy contact shape of the object at `true_pose`, drawing from `r`.
pub fn synth_query_with<R: Rng + ?Sized>(
    renderer: &MeshRenderer,
    sensor: &SensorModel,
    true_pose: &Pose,
    noise: &NoiseModel,
    r: &mut R,
) -> Result<ContactShape> {
    let mut pose = jitter_pose(true_pose, &noise.pose_jitter, r);
    let gap = renderer.contact_gap(&pose, sensor).ok_or(Error::NoContactPossible)?;
    if gap.abs() > CONTACT_TOL {
        log::debug!("pose jitter moved the object {gap:.3e} mm off the sensor; re-projecting");
        pose = renderer.project_to_contact(&pose, sensor)?.0;
    }
    let [lo, hi] = noise.delta_d_jitter;
    let dd = if hi > lo { r.random_range(lo..hi) } else { lo };
    let mut cs = renderer.render_contact_shape(&pose, sensor, Some(dd))?;
    let depth = (noise.depth_noise_sigma > 0.0).then(|| Normal::new(0.0, noise.depth_noise_sigma).expect("valid sigma"));
    for v in cs.values.iter_mut() {
        if *v >= dd {
            continue;
        }
        if let Some(n) = &depth {
            *v = (*v + n.sample(r)).clamp(0.0, dd);
        }
        if noise.pixel_dropout > 0.0 && r.random::<f64>() < noise.pixel_dropout {
            *v = dd;
        }
    }
    Ok(cs)
}

/// [`synth_query_with`] on the stream selected by `noise.seed`.
pub fn synth_query(renderer: &MeshRenderer, sensor: &SensorModel, true_pose: &Pose, noise: &NoiseModel) -> Result<ContactShape> {
    let mut r = rng::stream(noise.seed, rng::STREAM_TRIAL, 0);
    synth_query_with(renderer, sensor, true_pose, noise, &mut r)
}

/// Average distance between model points under two poses, on a fixed set of
/// area-uniform surface samples.
#[derive(Debug, Clone)]
pub struct AddMetric {
    samples: PointCloud,
}

impl AddMetric {
    pub fn new(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Self> {
        Ok(AddMetric { samples: mesh.sample_surface(n, seed)? })
    }

    pub fn error(&self, a: &Pose, b: &Pose) -> f64 {
        pose_distance(a, b, &self.samples)
    }

    pub fn samples(&self) -> &PointCloud {
        &self.samples
    }
}

/// ADD error between two poses with `n` fresh surface samples.
pub fn add_error(a: &Pose, b: &Pose, mesh: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    Ok(AddMetric::new(mesh, n, seed)?.error(a, b))
}

/// Mean error of guessing a uniformly random grid pose for a uniformly random
/// grid pose.
pub fn random_baseline(grid: &PoseGrid, metric: &AddMetric, trials: usize, seed: u64) -> f64 {
    if trials == 0 {
        return 0.0;
    }
    let mut r = rng::stream(seed, rng::STREAM_BASELINE, u64::MAX);
    let total: f64 = (0..trials)
        .map(|_| {
            let (i, j) = (r.random_range(0..grid.len()), r.random_range(0..grid.len()));
            metric.error(grid.pose(i), grid.pose(j))
        })
        .sum();
    total / trials as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn zero_noise_matches_plain_render() {
        let mesh = fixtures::asymmetric_prism();
        let sensor = SensorModel::work();
        let r = MeshRenderer::new(&mesh);
        let pose = r.project_to_contact(&Pose::from_translation(Vector3::new(1.0, 0.5, 40.0)), &sensor).unwrap().0;
        let q = synth_query(&r, &sensor, &pose, &NoiseModel::none(sensor.delta_d)).unwrap();
        assert_eq!(q, r.render_contact_shape(&pose, &sensor, None).unwrap());
        let all_drop = NoiseModel { pixel_dropout: 1.0, ..NoiseModel::none(sensor.delta_d) };
        assert!(!synth_query(&r, &sensor, &pose, &all_drop).unwrap().has_contact());
    }
}
