//! Pose posteriors over grid indices, multi-contact fusion with prior
//! correction, and the kinematic baseline. Everything is kept in log space.

mod prior;

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::grid::PoseGrid;
use crate::render::{ContactShape, MeshRenderer, SensorModel};
use crate::similarity::{score, Encoder};

pub use prior::{Prior, PriorSpec};

/// Log probability per grid index of the grid identified by `grid_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePosterior {
    pub grid_ref: String,
    pub log_prob: Vec<f64>,
}

/// `log(sum(exp(v)))`, or `-inf` when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl PosePosterior {
    /// Normalizes unnormalized log weights.
    pub fn from_log_weights(grid_ref: String, mut log_w: Vec<f64>) -> Result<Self> {
        if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical("posterior weights contain NaN or +inf".into()));
        }
        let z = log_sum_exp(&log_w);
        if z == f64::NEG_INFINITY {
            return Err(Error::EmptySupport);
        }
        log_w.iter_mut().for_each(|v| *v -= z);
        Ok(PosePosterior { grid_ref, log_prob: log_w })
    }

    pub fn uniform_over(grid_ref: String, support: &[bool]) -> Result<Self> {
        let log_w = support.iter().map(|&s| if s { 0.0 } else { f64::NEG_INFINITY }).collect();
        PosePosterior::from_log_weights(grid_ref, log_w)
    }

    pub fn len(&self) -> usize {
        self.log_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_prob.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.log_prob.iter().map(|v| v.exp()).collect()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.log_prob[i] > f64::NEG_INFINITY).collect()
    }

    /// The `k` most likely indices with their probabilities, most likely
    /// first, ties to the lower index.
    pub fn best_k(&self, k: usize) -> Vec<(usize, f64)> {
        let k = if k > self.len() {
            log::warn!("best_k: k = {k} exceeds grid size {}, clamping", self.len());
            self.len()
        } else {
            k
        };
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let cmp = |a: &usize, b: &usize| self.log_prob[*b].total_cmp(&self.log_prob[*a]).then(a.cmp(b));
        if k > 0 && k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable_by(cmp);
        idx.truncate(k);
        idx.into_iter().map(|i| (i, self.log_prob[i].exp())).collect()
    }

    /// `index,x,y,z,qw,qx,qy,qz,log_prob` per grid pose.
    pub fn to_csv(&self, grid: &PoseGrid) -> String {
        let mut out = String::from("index,x,y,z,qw,qx,qy,qz,log_prob\n");
        for (i, lp) in self.log_prob.iter().enumerate() {
            let p = grid.pose(i);
            let t = p.translation();
            let q = p.quaternion();
            let _ = writeln!(out, "{i},{},{},{},{},{},{},{},{lp}", t.x, t.y, t.z, q[0], q[1], q[2], q[3]);
        }
        out
    }

    /// Reads the `log_prob` column of [`PosePosterior::to_csv`] output.
    pub fn from_csv(text: &str, grid_ref: String) -> Result<Self> {
        let mut log_prob = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |m: &str| Error::Parse { format: "posterior CSV", location: format!("line {}", n + 1), message: m.into() };
            if fields.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            let index: usize = fields[0].trim().parse().map_err(|_| bad("bad index"))?;
            if index != log_prob.len() {
                return Err(bad("indices must be consecutive from 0"));
            }
            log_prob.push(fields[8].trim().parse::<f64>().map_err(|_| bad("bad log_prob"))?);
        }
        Ok(PosePosterior { grid_ref, log_prob })
    }
}

/// Softmax over the scaled similarities of `cs` to every grid shape.
pub fn single_contact_posterior(cs: &ContactShape, grid: &PoseGrid, enc: &Encoder) -> Result<PosePosterior> {
    let logits = score(enc, &enc.encode(cs), grid)?;
    PosePosterior::from_log_weights(grid.fingerprint(), logits)
}

/// One sensor of a rig: its camera model and its pose in the frame of sensor 1.
#[derive(Debug, Clone)]
pub struct SensorMount {
    pub sensor: SensorModel,
    pub extrinsic: Pose,
}

/// Several sensors touching one object, each with a grid in its own frame.
#[derive(Debug, Clone)]
pub struct SensorRig {
    pub mounts: Vec<SensorMount>,
    pub grids: Vec<Arc<PoseGrid>>,
}

impl SensorRig {
    pub fn new(mounts: Vec<SensorMount>, grids: Vec<Arc<PoseGrid>>) -> Result<Self> {
        if mounts.is_empty() || mounts.len() != grids.len() {
            return Err(Error::InvalidInput("rig needs one grid per sensor and at least one sensor".into()));
        }
        let e = &mounts[0].extrinsic;
        if (e.rotation() - nalgebra::Matrix3::identity()).abs().max() > 1e-9 || e.translation().norm() > 1e-9 {
            return Err(Error::InvalidInput("sensor 1 extrinsic must be the identity".into()));
        }
        let fp = grids[0].mesh_fingerprint();
        if grids.iter().any(|g| g.mesh_fingerprint() != fp) {
            return Err(Error::FingerprintMismatch {
                expected: fp.to_string(),
                found: grids.iter().map(|g| g.mesh_fingerprint()).find(|f| *f != fp).unwrap_or_default().to_string(),
            });
        }
        Ok(SensorRig { mounts, grids })
    }

    pub fn len(&self) -> usize {
        self.mounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mounts.is_empty()
    }
}

/// Tuning of the cross-grid contact test and of excluded poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionOptions {
    /// A pose contacts sensor `i` when its nearest grid-`i` pose is within
    /// this multiple of grid `i`'s mean nearest-neighbour distance.
    pub contact_factor: f64,
    /// Log weight given to excluded poses instead of `-inf`.
    pub exclusion_log_floor: Option<f64>,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions { contact_factor: 1.5, exclusion_log_floor: None }
    }
}

/// For each grid-1 pose, the nearest pose of grid `i` when the object would
/// also touch sensor `i`, else `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMap {
    pub targets: Vec<Option<usize>>,
}

impl TransferMap {
    pub fn identity(n: usize) -> Self {
        TransferMap { targets: (0..n).map(Some).collect() }
    }

    pub fn compute(grid1: &PoseGrid, grid_i: &PoseGrid, extrinsic: &Pose, contact_factor: f64) -> Self {
        let to_i = extrinsic.inverse();
        let radius = contact_factor * grid_i.mean_nn_distance();
        let targets = grid1
            .poses()
            .par_iter()
            .map(|x| grid_i.nearest_within(&to_i.compose(x), radius).map(|(j, _)| j))
            .collect();
        TransferMap { targets }
    }

    pub fn for_rig(rig: &SensorRig, opts: &FusionOptions) -> Vec<TransferMap> {
        let g1 = &rig.grids[0];
        (0..rig.len())
            .map(|i| {
                if i == 0 {
                    TransferMap::identity(g1.len())
                } else {
                    TransferMap::compute(g1, &rig.grids[i], &rig.mounts[i].extrinsic, opts.contact_factor)
                }
            })
            .collect()
    }
}

/// What one sensor contributes to the fusion.
#[derive(Debug, Clone, Copy)]
pub struct SensorEvidence<'a> {
    pub transfer: &'a TransferMap,
    /// Single-contact log posterior over grid `i`; `None` when the sensor
    /// reports no contact.
    pub log_prob: Option<&'a [f64]>,
}

/// Fuses per-sensor evidence over grid 1:
/// `log P_task(x) + sum_i log P(x_i | CS_i) - N log P_train(x)`, normalized,
/// where `N` counts the sensors in contact. A pose is excluded when a sensor
/// in contact cannot be touched from it, or a sensor without contact would be.
pub fn fuse_log_posteriors(
    grid_ref: String,
    evidence: &[SensorEvidence<'_>],
    log_task: Option<&[f64]>,
    log_train: Option<&[f64]>,
    opts: &FusionOptions,
) -> Result<PosePosterior> {
    let first = evidence.first().ok_or_else(|| Error::InvalidInput("fusion needs at least one sensor".into()))?;
    let n = first.transfer.targets.len();
    if evidence.iter().any(|e| e.transfer.targets.len() != n) {
        return Err(Error::InvalidInput("transfer maps disagree on grid size".into()));
    }
    for prior in [log_task, log_train].into_iter().flatten() {
        if prior.len() != n {
            return Err(Error::InvalidInput("prior length differs from grid size".into()));
        }
    }
    let n_contact = evidence.iter().filter(|e| e.log_prob.is_some()).count() as f64;
    let excluded = opts.exclusion_log_floor.unwrap_or(f64::NEG_INFINITY);
    let log_w: Vec<f64> = (0..n)
        .map(|x| {
            let mut acc = log_task.map_or(0.0, |t| t[x]);
            for e in evidence {
                acc += match (e.log_prob, e.transfer.targets[x]) {
                    (Some(lp), Some(j)) => lp[j],
                    (None, None) => 0.0,
                    _ => excluded,
                };
            }
            if let Some(tr) = log_train {
                if tr[x] == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                acc -= n_contact * tr[x];
            }
            acc
        })
        .collect();
    PosePosterior::from_log_weights(grid_ref, log_w)
}

/// Posterior over grid 1 given one contact shape per sensor. A shape with no
/// contact pixels means the sensor is not touching the object.
pub fn fuse_multi_contact(
    rig: &SensorRig,
    shapes: &[ContactShape],
    enc: &Encoder,
    priors: &PriorSpec,
    opts: &FusionOptions,
) -> Result<PosePosterior> {
    let transfers = TransferMap::for_rig(rig, opts);
    fuse_with_transfers(rig, &transfers, shapes, enc, priors, opts)
}

/// As [`fuse_multi_contact`] with precomputed transfer maps.
pub fn fuse_with_transfers(
    rig: &SensorRig,
    transfers: &[TransferMap],
    shapes: &[ContactShape],
    enc: &Encoder,
    priors: &PriorSpec,
    opts: &FusionOptions,
) -> Result<PosePosterior> {
    if shapes.len() != rig.len() || transfers.len() != rig.len() {
        return Err(Error::InvalidInput(format!("rig has {} sensors but got {} shapes", rig.len(), shapes.len())));
    }
    let posteriors: Vec<Option<PosePosterior>> = shapes
        .iter()
        .zip(&rig.grids)
        .map(|(cs, g)| cs.has_contact().then(|| single_contact_posterior(cs, g, enc)).transpose())
        .collect::<Result<_>>()?;
    let evidence: Vec<SensorEvidence> = transfers
        .iter()
        .zip(&posteriors)
        .map(|(t, p)| SensorEvidence { transfer: t, log_prob: p.as_ref().map(|p| p.log_prob.as_slice()) })
        .collect();
    let n = rig.grids[0].len();
    let task = priors.task.log_weights(n)?;
    let train = priors.train.log_weights(n)?;
    fuse_log_posteriors(rig.grids[0].fingerprint(), &evidence, task.as_deref(), train.as_deref(), opts)
}

/// For each grid-1 pose, whether the object placed there comes within
/// `tolerance` mm of sensor `i`'s plane inside its window.
pub fn sensor_touched(rig: &SensorRig, renderer: &MeshRenderer, i: usize, tolerance: f64) -> Vec<bool> {
    let mount = &rig.mounts[i];
    let to_sensor = mount.extrinsic.inverse();
    rig.grids[0]
        .poses()
        .par_iter()
        .map(|x| {
            renderer
                .contact_gap(&to_sensor.compose(x), &mount.sensor)
                .is_some_and(|gap| gap.abs() <= tolerance)
        })
        .collect()
}

/// Grid-1 poses consistent with the contact flags of every sensor: touching
/// each sensor that reports contact and no other.
pub fn kinematic_support(rig: &SensorRig, renderer: &MeshRenderer, contact_flags: &[bool], tolerance: f64) -> Vec<bool> {
    let mut support = vec![true; rig.grids[0].len()];
    for (i, &flag) in contact_flags.iter().enumerate().take(rig.len()) {
        for (s, t) in support.iter_mut().zip(sensor_touched(rig, renderer, i, tolerance)) {
            *s &= t == flag;
        }
    }
    support
}

/// Uniform posterior over the kinematically consistent poses. The contact
/// tolerance is `opts.contact_factor` times grid 1's mean neighbour distance.
pub fn kinematic_posterior(
    rig: &SensorRig,
    renderer: &MeshRenderer,
    contact_flags: &[bool],
    opts: &FusionOptions,
) -> Result<PosePosterior> {
    if contact_flags.len() != rig.len() {
        return Err(Error::InvalidInput("one contact flag per sensor required".into()));
    }
    if renderer.mesh().fingerprint() != rig.grids[0].mesh_fingerprint() {
        return Err(Error::FingerprintMismatch {
            expected: rig.grids[0].mesh_fingerprint().to_string(),
            found: renderer.mesh().fingerprint(),
        });
    }
    let tolerance = opts.contact_factor * rig.grids[0].mean_nn_distance();
    PosePosterior::uniform_over(rig.grids[0].fingerprint(), &kinematic_support(rig, renderer, contact_flags, tolerance))
}
