//! Contrastive training of the linear encoder: every epoch re-encodes the
//! grid, draws fresh contact poses with a random contact threshold, labels each
//! with its nearest grid pose and minimizes the softmax cross-entropy.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mask_input, normalize_or_e1, project, Encoder, DEFAULT_EMBED_DIM, DEFAULT_TEMPERATURE, INPUT_DIM};
use crate::error::{Error, Result};
use crate::geometry::TriangleMesh;
use crate::grid::{sample_contact_pose, PoseGrid};
use crate::render::{MeshRenderer, SensorModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub delta_d_min: f64,
    pub delta_d_max: f64,
    pub embed_dim: usize,
    pub temperature: f64,
    /// Heavy-ball momentum; 0 gives plain gradient descent.
    pub momentum: f64,
    /// Row diversity of the initial weights, see [`Encoder::linear_random`].
    pub init_spread: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.03,
            weight_decay: 1e-4,
            batch_size: 32,
            samples_per_epoch: 256,
            delta_d_min: 1.0,
            delta_d_max: 2.0,
            embed_dim: DEFAULT_EMBED_DIM,
            temperature: DEFAULT_TEMPERATURE,
            momentum: 0.0,
            init_spread: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sensor: &SensorModel) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("training: {m}")));
        if !(self.delta_d_min > 0.0 && self.delta_d_min < self.delta_d_max && self.delta_d_max <= sensor.delta_d) {
            return bad(format!(
                "need 0 < delta_d_min < delta_d_max <= sensor delta_d ({}), got {} and {}",
                sensor.delta_d, self.delta_d_min, self.delta_d_max
            ));
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return bad("batch_size and embed_dim must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0 && self.temperature > 0.0) {
            return bad("learning_rate, weight_decay must be non-negative and temperature positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub top1_acc: f64,
}

pub fn loss_curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,top1_acc\n");
    for s in curve {
        out.push_str(&format!("{},{:.9},{:.6}\n", s.epoch, s.mean_loss, s.top1_acc));
    }
    out
}

/// Downsampled query mask and the index of its nearest grid pose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingQuery {
    pub input: Vec<f64>,
    pub label: usize,
}

/// `count` random contact poses from the grid's parameter space, rendered with
/// a contact threshold drawn uniformly from `[delta_d_min, delta_d_max]`.
pub fn sample_training_queries(
    grid: &PoseGrid,
    renderer: &MeshRenderer,
    sensor: &SensorModel,
    cfg: &TrainConfig,
    round: u64,
    count: usize,
) -> Result<Vec<TrainingQuery>> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(cfg.seed, rng::STREAM_TRAIN, (round << 32) | k as u64);
            let pose = sample_contact_pose(renderer, sensor, grid.spec(), &mut r)?;
            let dd = r.random_range(cfg.delta_d_min..cfg.delta_d_max);
            let cs = renderer.render_contact_shape(&pose, sensor, Some(dd))?;
            Ok(TrainingQuery { input: mask_input(&cs), label: grid.nearest_pose(&pose).0 })
        })
        .collect()
}

/// Loss on a batch and its gradient with respect to the weights.
#[derive(Debug, Clone)]
pub struct BatchEval {
    /// Mean cross-entropy plus the weight-decay penalty `wd / 2 |W|^2`.
    pub objective: f64,
    pub cross_entropy: f64,
    pub top1_acc: f64,
    pub gradient: Vec<f64>,
}

/// Cross-entropy of `softmax(<q, g_i> / T)` against the labels, with the grid
/// descriptors `grid_desc` (row-major, `n x embed_dim`) held fixed.
pub fn loss_and_gradient(
    weights: &[f64],
    embed_dim: usize,
    temperature: f64,
    weight_decay: f64,
    grid_desc: &[f64],
    queries: &[TrainingQuery],
) -> BatchEval {
    let n = grid_desc.len() / embed_dim;
    let per_query: Vec<(f64, bool, Vec<f64>, Vec<(usize, f64)>)> = queries
        .par_iter()
        .map(|q| {
            let y = project(weights, embed_dim, &q.input);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            let e = normalize_or_e1(y);
            let logits: Vec<f64> = grid_desc
                .chunks_exact(embed_dim)
                .map(|g| g.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / temperature)
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let ce = m + z.ln() - logits[q.label];
            let correct = super::argmax(&logits) == q.label;
            let mut dy = vec![0.0; embed_dim];
            if norm > 0.0 && norm.is_finite() {
                // dL/de = (E_p[g] - g_label) / T
                let mut ge = vec![0.0; embed_dim];
                for i in 0..n {
                    let p = (logits[i] - m).exp() / z;
                    for (acc, g) in ge.iter_mut().zip(&grid_desc[i * embed_dim..(i + 1) * embed_dim]) {
                        *acc += p * g;
                    }
                }
                for (acc, g) in ge.iter_mut().zip(&grid_desc[q.label * embed_dim..(q.label + 1) * embed_dim]) {
                    *acc = (*acc - g) / temperature;
                }
                let proj: f64 = ge.iter().zip(&e).map(|(a, b)| a * b).sum();
                for r in 0..embed_dim {
                    dy[r] = (ge[r] - e[r] * proj) / norm;
                }
            }
            let nz = q.input.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
            (ce, correct, dy, nz)
        })
        .collect();
    let b = queries.len().max(1) as f64;
    let mut gradient: Vec<f64> = weights.iter().map(|w| weight_decay * w).collect();
    let mut ce_sum = 0.0;
    let mut hits = 0usize;
    for (ce, correct, dy, nz) in &per_query {
        ce_sum += ce;
        hits += *correct as usize;
        for (r, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut gradient[r * INPUT_DIM..(r + 1) * INPUT_DIM];
            for &(j, x) in nz {
                row[j] += d * x / b;
            }
        }
    }
    let penalty = 0.5 * weight_decay * weights.iter().map(|w| w * w).sum::<f64>();
    BatchEval {
        objective: ce_sum / b + penalty,
        cross_entropy: ce_sum / b,
        top1_acc: hits as f64 / b,
        gradient,
    }
}

fn grid_descriptors(enc: &Encoder, inputs: &[Vec<f64>]) -> Vec<f64> {
    inputs.par_iter().flat_map_iter(|x| enc.encode_input(x)).collect()
}

/// Trains a linear encoder on `grid`. The returned encoder carries its loss
/// curve; its weights are rounded to f32, the precision of the encoder file.
pub fn train_contrastive(
    grid: &PoseGrid,
    mesh: &TriangleMesh,
    sensor: &SensorModel,
    cfg: &TrainConfig,
) -> Result<Encoder> {
    cfg.validate(sensor)?;
    let fp = mesh.fingerprint();
    if fp != grid.mesh_fingerprint() {
        return Err(Error::FingerprintMismatch { expected: grid.mesh_fingerprint().to_string(), found: fp });
    }
    if (sensor.width, sensor.height) != (grid.sensor().width, grid.sensor().height) {
        return Err(Error::InvalidInput("training sensor resolution differs from the grid's".into()));
    }
    let mut enc = Encoder::linear_random(cfg.embed_dim, cfg.temperature, cfg.init_spread, cfg.seed);
    enc.grid_fingerprint = Some(grid.fingerprint());
    if cfg.epochs == 0 {
        return Ok(enc);
    }
    let renderer = MeshRenderer::new(mesh);
    let grid_inputs: Vec<Vec<f64>> = (0..grid.len()).into_par_iter().map(|i| mask_input(&grid.shape(i))).collect();
    let batches_per_epoch = cfg.samples_per_epoch.div_ceil(cfg.batch_size).max(1);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut velocity = vec![0.0; enc.weights.len()];
    let mut initial = None;
    let mut over = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let desc = grid_descriptors(&enc, &grid_inputs);
        let queries = sample_training_queries(grid, &renderer, sensor, cfg, epoch as u64, cfg.samples_per_epoch)?;
        let (mut loss_sum, mut hit_sum) = (0.0, 0.0);
        for batch in queries.chunks(cfg.batch_size) {
            let eval = loss_and_gradient(&enc.weights, enc.embed_dim, cfg.temperature, cfg.weight_decay, &desc, batch);
            if !eval.objective.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += eval.cross_entropy * batch.len() as f64;
            hit_sum += eval.top1_acc * batch.len() as f64;
            let lr = 0.5 * cfg.learning_rate * (1.0 + (PI * step as f64 / total_steps).cos());
            for ((w, v), g) in enc.weights.iter_mut().zip(velocity.iter_mut()).zip(&eval.gradient) {
                *v = cfg.momentum * *v + g;
                *w -= lr * *v;
            }
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / queries.len().max(1) as f64,
            top1_acc: hit_sum / queries.len().max(1) as f64,
        };
        log::info!("epoch {epoch}: loss {:.4}, top-1 {:.3}", stats.mean_loss, stats.top1_acc);
        enc.loss_curve.push(stats);
        let init = *initial.get_or_insert(stats.mean_loss);
        over = if stats.mean_loss > 10.0 * init { over + 1 } else { 0 };
        if over >= 3 {
            return Err(Error::Divergence { epoch, loss: stats.mean_loss, initial: init });
        }
    }
    for w in enc.weights.iter_mut() {
        *w = *w as f32 as f64;
    }
    Ok(enc)
}
