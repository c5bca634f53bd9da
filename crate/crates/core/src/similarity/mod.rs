//! Contact-shape descriptors and grid scoring.

mod train;

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::hex16;
use crate::grid::{Descriptors, PoseGrid};
use crate::io::write_atomic;
use crate::render::{area_mean_resize, ContactShape};
use crate::rng;

pub use train::{
    loss_and_gradient, loss_curve_csv, sample_training_queries, train_contrastive, EpochStats, TrainConfig,
    TrainingQuery,
};

/// Side of the downsampled mask fed to the encoders.
pub const INPUT_SIZE: usize = 32;
pub const INPUT_DIM: usize = INPUT_SIZE * INPUT_SIZE;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_EMBED_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// The normalized downsampled mask itself.
    BaselineMask,
    /// Learned linear projection of the downsampled mask.
    LinearContrastive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    /// Row-major `embed_dim x INPUT_DIM`; empty for the baseline.
    pub weights: Vec<f64>,
    pub temperature: f64,
    /// Grid the weights were trained on, if any.
    pub grid_fingerprint: Option<String>,
    pub loss_curve: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderHeader {
    kind: EncoderKind,
    input_size: usize,
    embed_dim: usize,
    temperature: f64,
    grid_fingerprint: Option<String>,
    fingerprint: String,
}

impl Encoder {
    pub fn baseline(temperature: f64) -> Self {
        Encoder {
            kind: EncoderKind::BaselineMask,
            embed_dim: INPUT_DIM,
            weights: Vec::new(),
            temperature,
            grid_fingerprint: None,
            loss_curve: Vec::new(),
        }
    }

    /// Seeded initialization `W = (1 + spread * Z) / sqrt(INPUT_DIM * embed_dim)`
    /// with standard normal `Z`. The shared component maps every mask to nearly
    /// the same direction, so the initial softmax over a grid is close to
    /// uniform; `spread` sets how much the rows differ. Values are rounded to
    /// f32 so they survive a save.
    pub fn linear_random(embed_dim: usize, temperature: f64, spread: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_ENCODER_INIT, 0);
        let scale = 1.0 / ((INPUT_DIM * embed_dim) as f64).sqrt();
        let weights = (0..embed_dim * INPUT_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                ((1.0 + spread * z) * scale) as f32 as f64
            })
            .collect();
        Encoder {
            kind: EncoderKind::LinearContrastive,
            embed_dim,
            weights,
            temperature,
            grid_fingerprint: None,
            loss_curve: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("encoder temperature must be positive".into()));
        }
        match self.kind {
            EncoderKind::BaselineMask if self.embed_dim != INPUT_DIM => {
                Err(Error::InvalidConfig(format!("baseline encoder has dimension {INPUT_DIM}")))
            }
            EncoderKind::LinearContrastive if self.embed_dim == 0 || self.weights.len() != self.embed_dim * INPUT_DIM => {
                Err(Error::InvalidConfig("linear encoder weight block has the wrong size".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed_dim
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}/{INPUT_SIZE}/{}/", self.kind, self.embed_dim));
        h.update(self.temperature.to_le_bytes());
        for w in &self.weights {
            h.update((*w as f32).to_le_bytes());
        }
        hex16(&h.finalize())
    }

    /// Descriptor of a contact shape (unit length).
    pub fn encode(&self, cs: &ContactShape) -> Vec<f64> {
        self.encode_input(&mask_input(cs))
    }

    pub fn encode_input(&self, x: &[f64]) -> Vec<f64> {
        let y = match self.kind {
            EncoderKind::BaselineMask => x.to_vec(),
            EncoderKind::LinearContrastive => project(&self.weights, self.embed_dim, x),
        };
        normalize_or_e1(y)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = EncoderHeader {
            kind: self.kind,
            input_size: INPUT_SIZE,
            embed_dim: self.embed_dim,
            temperature: self.temperature,
            grid_fingerprint: self.grid_fingerprint.clone(),
            fingerprint: self.fingerprint(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for w in &self.weights {
            out.extend_from_slice(&(*w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Corrupt("encoder file has no header line".into()))?;
        let header: EncoderHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Corrupt(format!("encoder header: {e}")))?;
        if header.input_size != INPUT_SIZE {
            return Err(Error::VersionMismatch(format!(
                "encoder input size {}, expected {INPUT_SIZE}",
                header.input_size
            )));
        }
        let block = &bytes[nl + 1..];
        if block.len() % 4 != 0 {
            return Err(Error::Corrupt("encoder weight block truncated".into()));
        }
        let enc = Encoder {
            kind: header.kind,
            embed_dim: header.embed_dim,
            weights: block.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            temperature: header.temperature,
            grid_fingerprint: header.grid_fingerprint,
            loss_curve: Vec::new(),
        };
        enc.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        if enc.fingerprint() != header.fingerprint {
            return Err(Error::Corrupt("encoder fingerprint does not match its weights".into()));
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Encoder::from_bytes(&bytes)
    }
}

/// Binary contact mask area-averaged down to `INPUT_SIZE x INPUT_SIZE`.
pub fn mask_input(cs: &ContactShape) -> Vec<f64> {
    let bits: Vec<f64> = (0..cs.width * cs.height).map(|i| if cs.is_contact(i) { 1.0 } else { 0.0 }).collect();
    area_mean_resize(&bits, cs.width, cs.height, INPUT_SIZE, INPUT_SIZE)
}

pub(crate) fn project(weights: &[f64], embed_dim: usize, x: &[f64]) -> Vec<f64> {
    let nz: Vec<(usize, f64)> = x.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
    (0..embed_dim)
        .map(|r| {
            let row = &weights[r * INPUT_DIM..(r + 1) * INPUT_DIM];
            nz.iter().map(|&(j, v)| row[j] * v).sum()
        })
        .collect()
}

/// Unit vector along `y`; the zero vector maps to `e1`.
pub(crate) fn normalize_or_e1(mut y: Vec<f64>) -> Vec<f64> {
    let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        y.iter_mut().for_each(|v| *v = 0.0);
        y[0] = 1.0;
    } else {
        y.iter_mut().for_each(|v| *v /= n);
    }
    y
}

/// Descriptors of every grid shape, in grid order.
pub fn encode_grid(enc: &Encoder, grid: &PoseGrid) -> Descriptors {
    let rows: Vec<Vec<f64>> = (0..grid.len()).into_par_iter().map(|i| enc.encode(&grid.shape(i))).collect();
    Descriptors {
        dim: enc.dim(),
        encoder_fingerprint: enc.fingerprint(),
        values: rows.iter().flatten().map(|&v| v as f32).collect(),
    }
}

/// Scaled similarities `<query, descriptor_i> / temperature` for every grid pose.
pub fn score(enc: &Encoder, query: &[f64], grid: &PoseGrid) -> Result<Vec<f64>> {
    let desc = grid
        .descriptors()
        .ok_or_else(|| Error::InvalidInput("grid has no descriptors; encode it first".into()))?;
    let fp = enc.fingerprint();
    if desc.encoder_fingerprint != fp {
        return Err(Error::FingerprintMismatch { expected: fp, found: desc.encoder_fingerprint.clone() });
    }
    if query.len() != desc.dim {
        return Err(Error::InvalidInput(format!("query has dimension {}, grid {}", query.len(), desc.dim)));
    }
    let inv_t = 1.0 / enc.temperature;
    let nonzero: Vec<usize> = (0..query.len()).filter(|&j| query[j] != 0.0).collect();
    if nonzero.len() * 4 < query.len() {
        // mask descriptors are sparse: stream the touched columns. Terms are
        // added in the same order as the dense loop, so sums are identical.
        let mut acc = vec![0.0f64; grid.len()];
        for &j in &nonzero {
            let q = query[j];
            for (a, &g) in acc.iter_mut().zip(grid.descriptor_column(j)) {
                *a += g as f64 * q;
            }
        }
        return Ok(acc.into_iter().map(|a| a * inv_t).collect());
    }
    Ok(desc
        .values
        .par_chunks(desc.dim)
        .map(|row| row.iter().zip(query).map(|(&g, &q)| g as f64 * q).sum::<f64>() * inv_t)
        .collect())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Index of the largest logit, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
