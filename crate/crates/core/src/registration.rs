//! Rigid registration of contact-shape point clouds by expectation
//! maximization over Gaussian mixtures, used to refine grid poses below the
//! grid spacing.
//!
//! Each cloud is treated as a mixture centred on the other one (isotropic
//! kernel of bandwidth `sigma` plus a uniform outlier term), and the two
//! log-likelihoods are maximized together. Every iteration computes soft
//! correspondences and solves the resulting weighted Procrustes problem in
//! closed form, so the objective never increases. Because the objective is
//! symmetric in the two clouds, identical clouds register to exactly the
//! identity.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose};
use crate::grid::PoseGrid;
use crate::render::{ContactShape, SensorModel};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    /// Kernel bandwidth, mm.
    pub sigma: f64,
    /// Mass of the uniform outlier component, in `[0, 1)`.
    pub outlier_weight: f64,
    pub max_iterations: usize,
    /// Stop once the transform moves less than this, mm.
    pub convergence_tol: f64,
    /// Clouds larger than this are subsampled.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            sigma: 1.0,
            outlier_weight: 0.1,
            max_iterations: 1,
            convergence_tol: 1e-4,
            max_points: 2000,
            seed: 0,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig("registration sigma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_weight) {
            return Err(Error::InvalidConfig("outlier_weight must be in [0, 1)".into()));
        }
        if self.max_points < 3 {
            return Err(Error::InvalidConfig("max_points must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps source coordinates onto the target.
    pub transform: Pose,
    /// Set when the weighted cross-covariance had rank at most one; the
    /// transform is then the identity.
    pub degenerate: bool,
    pub iterations: usize,
    /// Objective (negative log-likelihood up to a constant) before the first
    /// iteration and after each one.
    pub objective: Vec<f64>,
}

// Both clouds draw from the same stream, so equal-sized clouds keep the same
// indices and a cloud registered against itself stays an exact match.
fn subsample(points: &[Vector3<f64>], max: usize, seed: u64) -> Vec<Vector3<f64>> {
    if points.len() <= max {
        return points.to_vec();
    }
    let mut r = rng::stream(seed, rng::STREAM_REGISTRATION, 0);
    let mut idx = sample(&mut r, points.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// First and second weighted moments of a correspondence set, enough to
/// solve the weighted Procrustes problem.
#[derive(Debug, Clone, Copy)]
struct Moments {
    total: f64,
    sum_t: Vector3<f64>,
    sum_s: Vector3<f64>,
    /// `sum w_nm t_n s_m^T`
    cross: Matrix3<f64>,
}

impl Moments {
    fn zero() -> Self {
        Moments { total: 0.0, sum_t: Vector3::zeros(), sum_s: Vector3::zeros(), cross: Matrix3::zeros() }
    }

    fn solve(&self) -> Option<Pose> {
        if !(self.total > 0.0 && self.total.is_finite()) {
            return None;
        }
        let mu_t = self.sum_t / self.total;
        let mu_s = self.sum_s / self.total;
        let a = self.cross - self.total * mu_t * mu_s.transpose();
        let svd = a.svd(true, true);
        let s = svd.singular_values;
        let (u, v_t) = (svd.u?, svd.v_t?);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
        // centring cancels most of the raw moment; what is left below this
        // scale is rounding noise
        let floor = 1e-12 * self.cross.norm();
        if !(s[order[0]] > floor) || s[order[1]] <= 1e-9 * s[order[0]] {
            return None;
        }
        let mut fix = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            // flip the direction of the smallest singular value
            fix[(order[2], order[2])] = -1.0;
        }
        let r = u * fix * v_t;
        Some(Pose::new(r, mu_t - r * mu_s))
    }
}

/// Kernel values below `exp(-KERNEL_CUTOFF)` are dropped; they vanish in
/// the rounding of the outlier constant they are added to.
const KERNEL_CUTOFF: f64 = 40.0;

const ROW_CHUNK: usize = 256;

struct EStep {
    moments: Moments,
    objective: f64,
}

/// One pass over all point pairs. With `K` the kernel between target `t_n`
/// and moved source `T s_m`, `D_n = sum_m K`, `D'_m = sum_n K`, the
/// correspondence weight is `K (1 / (D_n + c_t) + 1 / (D'_m + c_s))`, and its
/// moments split into per-row and per-column sums.
fn e_step(src: &[Vector3<f64>], tgt: &[Vector3<f64>], pose: &Pose, params: &RegistrationParams, volume: f64) -> EStep {
    let moved: Vec<Vector3<f64>> = src.iter().map(|p| pose.transform_point(p)).collect();
    let split = |v: &[Vector3<f64>]| -> [Vec<f64>; 3] { std::array::from_fn(|a| v.iter().map(|p| p[a]).collect()) };
    let [mx, my, mz] = split(&moved);
    let [sx, sy, sz] = split(src);
    let inv2s2 = 1.0 / (2.0 * params.sigma * params.sigma);
    let (m, n) = (src.len() as f64, tgt.len() as f64);
    let w = params.outlier_weight;
    let base = (2.0 * PI * params.sigma * params.sigma).powf(1.5) * w / (1.0 - w) / volume;
    let c_t = base * m / n;
    let c_s = base * n / m;

    // per target row: sum K, sum K s_m; per source column: sum K, sum K t_n.
    // Fixed-size chunks summed in order keep the result schedule independent.
    let partials: Vec<_> = tgt
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut rows = Vec::with_capacity(chunk.len());
            let mut col_k = vec![0.0; src.len()];
            let mut col_kt = vec![Vector3::zeros(); src.len()];
            for t in chunk {
                let (mut rk, mut rx, mut ry, mut rz) = (0.0, 0.0, 0.0, 0.0);
                for j in 0..mx.len() {
                    let (dx, dy, dz) = (t.x - mx[j], t.y - my[j], t.z - mz[j]);
                    let e = (dx * dx + dy * dy + dz * dz) * inv2s2;
                    if e > KERNEL_CUTOFF {
                        continue;
                    }
                    let k = (-e).exp();
                    rk += k;
                    rx += k * sx[j];
                    ry += k * sy[j];
                    rz += k * sz[j];
                    col_k[j] += k;
                    col_kt[j] += k * t;
                }
                rows.push((rk, Vector3::new(rx, ry, rz)));
            }
            (rows, col_k, col_kt)
        })
        .collect();
    let mut rows = Vec::with_capacity(tgt.len());
    let mut col_k = vec![0.0; src.len()];
    let mut col_kt = vec![Vector3::zeros(); src.len()];
    for (r, ck, ckt) in partials {
        rows.extend(r);
        col_k.iter_mut().zip(ck).for_each(|(a, b)| *a += b);
        col_kt.iter_mut().zip(ckt).for_each(|(a, b)| *a += b);
    }

    let mut mo = Moments::zero();
    let mut objective = 0.0;
    for (t, (rk, rks)) in tgt.iter().zip(&rows) {
        let a = 1.0 / (rk + c_t);
        objective -= (rk + c_t).ln();
        mo.total += a * rk;
        mo.sum_t += (a * rk) * t;
        mo.sum_s += a * rks;
        mo.cross += a * t * rks.transpose();
    }
    for ((s, ck), ckt) in src.iter().zip(&col_k).zip(&col_kt) {
        let b = 1.0 / (ck + c_s);
        objective -= (ck + c_s).ln();
        mo.total += b * ck;
        mo.sum_t += b * ckt;
        mo.sum_s += (b * ck) * s;
        mo.cross += b * ckt * s.transpose();
    }
    EStep { moments: mo, objective }
}

/// Rotation and translation minimizing `sum w_nm |t_n - (R s_m + t)|^2`.
/// Returns `None` when the cross-covariance has rank at most one.
pub fn weighted_procrustes(src: &[Vector3<f64>], tgt: &[Vector3<f64>], w: &[Vec<f64>]) -> Option<Pose> {
    let mut mo = Moments::zero();
    for (t, row) in tgt.iter().zip(w) {
        for (s, &x) in src.iter().zip(row) {
            mo.total += x;
            mo.sum_t += x * t;
            mo.sum_s += x * s;
            mo.cross += x * t * s.transpose();
        }
    }
    mo.solve()
}

const OVERRELAX_GROWTH: f64 = 1.5;

/// `step ∘ pose⁻¹` raised to the power `eta`, screwing about `pivot`, then
/// applied after `pose`.
fn extrapolate(pose: &Pose, step: &Pose, eta: f64, pivot: &Vector3<f64>) -> Pose {
    let d = step.compose(&pose.inverse());
    let rot = Rotation3::from_matrix_unchecked(*d.rotation()).powf(eta);
    let shift = (d.transform_point(pivot) - pivot) * eta;
    let t = pivot + shift - rot * pivot;
    Pose::new(*rot.matrix(), t).compose(pose)
}

fn transform_change(a: &Pose, b: &Pose, radius: f64) -> f64 {
    (a.translation() - b.translation()).norm() + (a.rotation() - b.rotation()).norm() * radius
}

/// Rigid transform taking `source` onto `target`.
pub fn register(source: &PointCloud, target: &PointCloud, params: &RegistrationParams) -> Result<RegistrationResult> {
    params.validate()?;
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::InvalidInput("registration needs at least 3 points per cloud".into()));
    }
    let src = subsample(source.points(), params.max_points, params.seed);
    let tgt = subsample(target.points(), params.max_points, params.seed);
    let c = src.iter().sum::<Vector3<f64>>() / src.len() as f64;
    let radius = (src.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / src.len() as f64).sqrt();
    // the outlier density is uniform over a volume set by the target's
    // spread, which keeps results independent of the length unit
    let ct = tgt.iter().sum::<Vector3<f64>>() / tgt.len() as f64;
    let spread = (tgt.iter().map(|p| (p - ct).norm_squared()).sum::<f64>() / tgt.len() as f64).sqrt();
    let volume = spread.powi(3).max(f64::MIN_POSITIVE);
    let mut pose = Pose::identity();
    let mut e = e_step(&src, &tgt, &pose, params, volume);
    let mut objective = vec![e.objective];
    let mut iterations = 0;
    let mut eta = 1.0;
    while iterations < params.max_iterations {
        let Some(step) = e.moments.solve() else {
            return Ok(RegistrationResult { transform: Pose::identity(), degenerate: true, iterations, objective });
        };
        iterations += 1;
        // Over-relaxed step: go `eta` times as far along the EM direction and
        // keep it only if the objective still drops. Flat patches otherwise
        // creep towards the optimum at a slow linear rate.
        let mut next = (step, None);
        if eta > 1.0 {
            let cand = extrapolate(&pose, &step, eta, &pose.transform_point(&c));
            let ec = e_step(&src, &tgt, &cand, params, volume);
            if ec.objective <= e.objective {
                next = (cand, Some(ec));
                eta *= OVERRELAX_GROWTH;
            } else {
                eta = 1.0;
            }
        } else {
            eta = OVERRELAX_GROWTH;
        }
        let (next, en) = next;
        let en = en.unwrap_or_else(|| e_step(&src, &tgt, &next, params, volume));
        objective.push(en.objective);
        let change = transform_change(&pose, &next, radius);
        pose = next;
        e = en;
        if change < params.convergence_tol {
            break;
        }
    }
    Ok(RegistrationResult { transform: pose, degenerate: false, iterations, objective })
}

/// Registers the stored contact shape of grid pose `index` onto the query and
/// applies the correction to the grid pose.
pub fn refine_pose(
    grid: &PoseGrid,
    index: usize,
    query: &ContactShape,
    sensor: &SensorModel,
    params: &RegistrationParams,
) -> Result<(Pose, RegistrationResult)> {
    if index >= grid.len() {
        return Err(Error::InvalidInput(format!("grid index {index} out of range ({} poses)", grid.len())));
    }
    let target = query.to_pointcloud(sensor)?;
    let source = grid.shape(index).to_pointcloud(sensor)?;
    let result = register(&source, &target, params)?;
    Ok((result.transform.compose(grid.pose(index)), result))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::new(
            (0..40)
                .map(|i| {
                    let f = i as f64;
                    Vector3::new((f * 1.7).sin() * 10.0, (f * 0.9).cos() * 8.0, (f * 2.3).sin() * 3.0 + 25.0)
                })
                .collect(),
        )
    }

    #[test]
    fn identical_clouds_give_identity() {
        let c = cloud();
        let r = register(&c, &c, &RegistrationParams { max_iterations: 5, ..Default::default() }).unwrap();
        assert!(!r.degenerate);
        assert!((r.transform.rotation() - Matrix3::identity()).abs().max() < 1e-9);
        assert!(r.transform.translation().norm() < 1e-9);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let line = PointCloud::new((0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect());
        let r = register(&line, &line, &RegistrationParams::default()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.transform, Pose::identity());
    }
}
