use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::report::{ExperimentReport, Method, TrialRecord};
use super::{random_baseline, synth_query_with, AddMetric, NoiseModel, ADD_SAMPLE_POINTS};
use crate::error::{Error, Result};
use crate::geometry::{Pose, TriangleMesh};
use crate::grid::{sample_contact_pose, PoseGrid};
use crate::posterior::{
    fuse_log_posteriors, sensor_touched, single_contact_posterior, FusionOptions, PosePosterior, PriorSpec,
    SensorEvidence, SensorMount, SensorRig, TransferMap,
};
use crate::registration::{refine_pose, RegistrationParams};
use crate::render::{ContactShape, MeshRenderer};
use crate::rng;
use crate::similarity::Encoder;

/// Stream index stride per trial; sensors and contact counts fill the low bits.
const PER_TRIAL: u64 = 64;

pub struct SingleContactSetup<'a> {
    pub mesh: &'a TriangleMesh,
    /// Built grid carrying descriptors of `encoder`.
    pub grid: &'a PoseGrid,
    pub encoder: &'a Encoder,
    pub noise: NoiseModel,
    pub registration: RegistrationParams,
    pub n_trials: usize,
    pub methods: Vec<Method>,
    /// Pose pairs drawn for the random baseline.
    pub random_trials: usize,
    pub seed: u64,
}

pub struct MultiContactSetup<'a> {
    pub mesh: &'a TriangleMesh,
    /// One encoded grid per sensor, each in its own sensor frame. Sensor 1
    /// comes first and defines the frame of the fused posterior.
    pub grids: Vec<Arc<PoseGrid>>,
    pub encoder: &'a Encoder,
    pub noise: NoiseModel,
    pub priors: PriorSpec,
    pub fusion: FusionOptions,
    pub n_examples: usize,
    pub max_contacts: usize,
    pub random_trials: usize,
    pub seed: u64,
}

fn record(trial: usize, n_contacts: usize, method: Method, truth: &Pose, est: Option<Pose>, metric: &AddMetric, random_mean: f64) -> TrialRecord {
    let (add_mm, failure) = match &est {
        Some(p) => (metric.error(truth, p), false),
        None => (random_mean, true),
    };
    TrialRecord {
        trial,
        n_contacts,
        method,
        true_pose: *truth,
        estimate: est,
        add_mm,
        normalized: add_mm / random_mean,
        failure,
    }
}

fn checked_random_mean(grid: &PoseGrid, metric: &AddMetric, trials: usize, seed: u64) -> Result<f64> {
    let m = random_baseline(grid, metric, trials.max(1), seed);
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidInput("random baseline error is zero; the grid needs distinct poses".into()));
    }
    Ok(m)
}

/// Candidate with the lowest error against the true pose.
fn oracle_pick(candidates: impl IntoIterator<Item = Pose>, truth: &Pose, metric: &AddMetric) -> Option<Pose> {
    candidates
        .into_iter()
        .map(|p| (metric.error(truth, &p), p))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, p)| p)
}

fn refined(grid: &PoseGrid, index: usize, query: &ContactShape, params: &RegistrationParams) -> Pose {
    match refine_pose(grid, index, query, grid.sensor(), params) {
        Ok((pose, _)) => pose,
        Err(e) => {
            log::debug!("refinement of grid pose {index} failed ({e}); keeping it unrefined");
            *grid.pose(index)
        }
    }
}

fn draw_contact<R: Rng + ?Sized>(
    renderer: &MeshRenderer,
    grid: &PoseGrid,
    noise: &NoiseModel,
    r: &mut R,
) -> Result<(Pose, ContactShape)> {
    let truth = sample_contact_pose(renderer, grid.sensor(), grid.spec(), r)?;
    let query = synth_query_with(renderer, grid.sensor(), &truth, noise, r)?;
    Ok((truth, query))
}

fn uniform_pick(support: &[bool], seed: u64, index: u64) -> Option<usize> {
    let members: Vec<usize> = support.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect();
    if members.is_empty() {
        return None;
    }
    let mut r = rng::stream(seed, rng::STREAM_BASELINE, index);
    Some(members[r.random_range(0..members.len())])
}

/// Single-sensor localization benchmark on continuously sampled contact poses.
pub fn run_single_contact_experiment(setup: &SingleContactSetup<'_>) -> Result<ExperimentReport> {
    setup.noise.validate()?;
    setup.registration.validate()?;
    let grid = setup.grid;
    let renderer = MeshRenderer::new(setup.mesh);
    let metric = AddMetric::new(setup.mesh, ADD_SAMPLE_POINTS, setup.seed)?;
    let random_mean = checked_random_mean(grid, &metric, setup.random_trials, setup.seed)?;
    let top = setup.methods.iter().filter_map(|m| m.candidates()).map(|(k, _)| k).max().unwrap_or(1);
    let everything = vec![true; grid.len()];

    let per_trial: Vec<Vec<TrialRecord>> = (0..setup.n_trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(setup.seed, rng::STREAM_TRIAL, t as u64);
            let (truth, query) = draw_contact(&renderer, grid, &setup.noise, &mut r)?;
            let post = single_contact_posterior(&query, grid, setup.encoder)?;
            let ranked = post.best_k(top);
            let out = setup
                .methods
                .iter()
                .map(|&method| {
                    let est = match method.candidates() {
                        Some((k, false)) => oracle_pick(ranked.iter().take(k).map(|(i, _)| *grid.pose(*i)), &truth, &metric),
                        Some((k, true)) => oracle_pick(
                            ranked.iter().take(k).map(|(i, _)| refined(grid, *i, &query, &setup.registration)),
                            &truth,
                            &metric,
                        ),
                        None => {
                            let index = t as u64 * PER_TRIAL + if method == Method::Random { 0 } else { 1 };
                            uniform_pick(&everything, setup.seed, index).map(|i| *grid.pose(i))
                        }
                    };
                    record(t, 1, method, &truth, est, &metric, random_mean)
                })
                .collect();
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(ExperimentReport { random_mean, grid_mean_nn: grid.mean_nn_distance(), records: per_trial.into_iter().flatten().collect() })
}

/// Multi-contact benchmark. For every example the object pose relative to
/// sensor 1 is drawn as in the single-contact experiment, and every further
/// sensor is placed where it touches the object at a pose drawn from its own
/// grid spec. Best-1 of the fused posterior and the kinematic baseline are
/// recorded for the first `N` sensors, `N = 1..=max_contacts`.
pub fn run_multi_contact_experiment(setup: &MultiContactSetup<'_>) -> Result<ExperimentReport> {
    setup.noise.validate()?;
    if setup.max_contacts == 0 || setup.grids.len() < setup.max_contacts {
        return Err(Error::InvalidConfig(format!(
            "{} contacts requested but only {} sensor grids given",
            setup.max_contacts,
            setup.grids.len()
        )));
    }
    let grids = &setup.grids[..setup.max_contacts];
    let grid1 = &grids[0];
    let n = grid1.len();
    let renderer = MeshRenderer::new(setup.mesh);
    let metric = AddMetric::new(setup.mesh, ADD_SAMPLE_POINTS, setup.seed)?;
    let random_mean = checked_random_mean(grid1, &metric, setup.random_trials, setup.seed)?;
    let log_task = setup.priors.task.log_weights(n)?;
    let log_train = setup.priors.train.log_weights(n)?;

    let per_example: Vec<Vec<TrialRecord>> = (0..setup.n_examples)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(setup.seed, rng::STREAM_TRIAL, t as u64);
            let (truth, q1) = draw_contact(&renderer, grid1, &setup.noise, &mut r)?;
            let mut mounts = vec![SensorMount { sensor: *grid1.sensor(), extrinsic: Pose::identity() }];
            let mut queries = vec![q1];
            for (i, g) in grids.iter().enumerate().skip(1) {
                let mut r = rng::stream(setup.seed, rng::STREAM_PLACEMENT, t as u64 * PER_TRIAL + i as u64);
                let (local, q) = draw_contact(&renderer, g, &setup.noise, &mut r)?;
                mounts.push(SensorMount { sensor: *g.sensor(), extrinsic: truth.compose(&local.inverse()) });
                queries.push(q);
            }
            let rig = SensorRig::new(mounts, grids.to_vec())?;
            let transfers = TransferMap::for_rig(&rig, &setup.fusion);
            let tolerance = setup.fusion.contact_factor * grid1.mean_nn_distance();
            let touched: Vec<Vec<bool>> = (0..rig.len()).map(|i| sensor_touched(&rig, &renderer, i, tolerance)).collect();
            let mut support = vec![true; n];
            let posteriors: Vec<Option<PosePosterior>> = queries
                .iter()
                .zip(grids)
                .map(|(q, g)| q.has_contact().then(|| single_contact_posterior(q, g, setup.encoder)).transpose())
                .collect::<Result<_>>()?;

            let mut out = Vec::with_capacity(2 * setup.max_contacts);
            for k in 1..=setup.max_contacts {
                let evidence: Vec<SensorEvidence> = transfers[..k]
                    .iter()
                    .zip(&posteriors)
                    .map(|(tr, p)| SensorEvidence { transfer: tr, log_prob: p.as_ref().map(|p| p.log_prob.as_slice()) })
                    .collect();
                let best = match fuse_log_posteriors(grid1.fingerprint(), &evidence, log_task.as_deref(), log_train.as_deref(), &setup.fusion) {
                    Ok(p) => Some(*grid1.pose(p.best_k(1)[0].0)),
                    Err(Error::EmptySupport) => {
                        log::debug!("example {t}: fused posterior empty with {k} contacts");
                        None
                    }
                    Err(e) => return Err(e),
                };
                out.push(record(t, k, Method::Best1, &truth, best, &metric, random_mean));
                let flag = queries[k - 1].has_contact();
                for (s, t) in support.iter_mut().zip(&touched[k - 1]) {
                    *s &= *t == flag;
                }
                let kin = uniform_pick(&support, setup.seed, t as u64 * PER_TRIAL + 1 + k as u64).map(|i| *grid1.pose(i));
                out.push(record(t, k, Method::Kinematic, &truth, kin, &metric, random_mean));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    Ok(ExperimentReport { random_mean, grid_mean_nn: grid1.mean_nn_distance(), records: per_example.into_iter().flatten().collect() })
}
