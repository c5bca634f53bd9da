use nalgebra::Vector3;
use rayon::prelude::*;

use crate::geometry::{PointCloud, Pose};

/// Average distance between corresponding surface points under two poses.
pub fn pose_distance(a: &Pose, b: &Pose, samples: &PointCloud) -> f64 {
    let m = a.rotation() - b.rotation();
    let dt = a.translation() - b.translation();
    let pts = samples.points();
    if pts.is_empty() {
        return 0.0;
    }
    let sum: f64 = pts.iter().map(|p| (m * p + dt).norm()).sum();
    sum / pts.len() as f64
}

/// Like [`pose_distance`], but gives up (returns `None`) once the mean is
/// certain to exceed `limit`. Completed sums are bit-identical to it.
fn pose_distance_bounded(a: &Pose, b: &Pose, pts: &[Vector3<f64>], limit: f64) -> Option<f64> {
    let m = a.rotation() - b.rotation();
    let dt = a.translation() - b.translation();
    let cap = limit * pts.len() as f64 * (1.0 + 1e-12);
    let mut sum = 0.0;
    for chunk in pts.chunks(64) {
        for p in chunk {
            sum += (m * p + dt).norm();
        }
        if sum > cap {
            return None;
        }
    }
    Some(sum / pts.len() as f64)
}

/// Sample points plus a coarse partition of them. For any cluster with
/// centroid `c` and weight `w`, the triangle inequality gives
/// `ADD(a, b) >= sum_k w_k |a(c_k) - b(c_k)|`, which prunes most candidates
/// of a nearest-pose scan without changing its result.
#[derive(Debug, Clone)]
pub(crate) struct PoseMetric {
    samples: PointCloud,
    centroids: Vec<Vector3<f64>>,
    weights: Vec<f64>,
}

const SEED_CANDIDATES: usize = 32;

impl PoseMetric {
    pub fn new(samples: PointCloud) -> Self {
        let pts = samples.points();
        let center = samples.centroid().unwrap_or_else(Vector3::zeros);
        let mut sums = [Vector3::zeros(); 8];
        let mut counts = [0usize; 8];
        for p in pts {
            let d = p - center;
            let k = (d.x >= 0.0) as usize | ((d.y >= 0.0) as usize) << 1 | ((d.z >= 0.0) as usize) << 2;
            sums[k] += p;
            counts[k] += 1;
        }
        let n = pts.len().max(1) as f64;
        let (mut centroids, mut weights) = (Vec::new(), Vec::new());
        for k in 0..8 {
            if counts[k] > 0 {
                centroids.push(sums[k] / counts[k] as f64);
                weights.push(counts[k] as f64 / n);
            }
        }
        PoseMetric { samples, centroids, weights }
    }

    pub fn samples(&self) -> &PointCloud {
        &self.samples
    }

    pub fn signature(&self, pose: &Pose) -> Vec<Vector3<f64>> {
        self.centroids.iter().map(|c| pose.transform_point(c)).collect()
    }

    pub fn signatures(&self, poses: &[Pose]) -> Vec<Vector3<f64>> {
        poses.iter().flat_map(|p| self.signature(p)).collect()
    }

    fn lower_bound(&self, a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        self.weights.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * (x - y).norm()).sum()
    }

    /// Exact argmin of the pose distance over `poses`, ties to the lowest index.
    pub fn nearest(
        &self,
        poses: &[Pose],
        signatures: &[Vector3<f64>],
        query: &Pose,
        exclude: Option<usize>,
    ) -> Option<(usize, f64)> {
        let k = self.centroids.len();
        let qsig = self.signature(query);
        let mut bounds: Vec<(f64, usize)> = (0..poses.len())
            .filter(|&i| Some(i) != exclude)
            .map(|i| (self.lower_bound(&qsig, &signatures[i * k..(i + 1) * k]), i))
            .collect();
        if bounds.is_empty() {
            return None;
        }
        let pts = self.samples.points();
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |i: usize, best: &mut (usize, f64)| {
            if let Some(d) = pose_distance_bounded(query, &poses[i], pts, best.1) {
                if d < best.1 || (d == best.1 && i < best.0) {
                    *best = (i, d);
                }
            }
        };
        let seeds = SEED_CANDIDATES.min(bounds.len());
        let mut order = bounds.clone();
        order.select_nth_unstable_by(seeds - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &order[..seeds] {
            consider(i, &mut best);
        }
        bounds.retain(|&(lb, _)| lb * (1.0 - 1e-9) <= best.1);
        for (_, i) in bounds {
            consider(i, &mut best);
        }
        Some(best)
    }

    /// Exact nearest pose among `candidates` if its distance is at most `radius`.
    pub fn nearest_among(
        &self,
        poses: &[Pose],
        candidates: impl Iterator<Item = usize>,
        query: &Pose,
        radius: f64,
    ) -> Option<(usize, f64)> {
        let pts = self.samples.points();
        let mut best = (usize::MAX, radius);
        let mut found = false;
        for i in candidates {
            if let Some(d) = pose_distance_bounded(query, &poses[i], pts, best.1) {
                if d <= radius && (!found || d < best.1 || (d == best.1 && i < best.0)) {
                    best = (i, d);
                    found = true;
                }
            }
        }
        found.then_some(best)
    }

    /// Mean over poses of the distance to the nearest other pose.
    pub fn mean_nearest_neighbor(&self, poses: &[Pose], signatures: &[Vector3<f64>]) -> f64 {
        if poses.len() < 2 {
            return 0.0;
        }
        let total: f64 = (0..poses.len())
            .into_par_iter()
            .map(|i| self.nearest(poses, signatures, &poses[i], Some(i)).map_or(0.0, |r| r.1))
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total / poses.len() as f64
    }
}
