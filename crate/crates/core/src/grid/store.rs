//! Grid file layout (little-endian):
//!
//! ```text
//! "TLGRID01" | crc32 u32 (of everything after it) | header length u64 | header JSON
//! poses      n x 12 f64 (row-major rotation, then translation)
//! samples    m x 3 f64
//! shapes     n packed 16-bit PGM records
//! descriptors n x dim f32 (absent when dim = 0)
//! ```

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Descriptors, GridSpec, PoseGrid};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose};
use crate::io::write_atomic;
use crate::render::{PackedShape, SensorModel};

pub const GRID_MAGIC: &[u8; 8] = b"TLGRID01";
pub const GRID_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    pose_count: usize,
    sample_count: usize,
    sensor: SensorModel,
    spec: GridSpec,
    mesh_fingerprint: String,
    mean_nn_distance: f64,
    descriptor_dim: usize,
    encoder_fingerprint: Option<String>,
}

pub fn grid_to_bytes(grid: &PoseGrid) -> Vec<u8> {
    let desc = grid.descriptors();
    let header = Header {
        format_version: GRID_FORMAT_VERSION,
        pose_count: grid.len(),
        sample_count: grid.sample_points().len(),
        sensor: *grid.sensor(),
        spec: grid.spec().clone(),
        mesh_fingerprint: grid.mesh_fingerprint().to_string(),
        mean_nn_distance: grid.mean_nn_distance(),
        descriptor_dim: desc.map_or(0, |d| d.dim),
        encoder_fingerprint: desc.map(|d| d.encoder_fingerprint.clone()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut body = Vec::new();
    body.extend_from_slice(&(json.len() as u64).to_le_bytes());
    body.extend_from_slice(&json);
    for p in grid.poses() {
        for v in p.to_array() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in grid.sample_points().points() {
        for v in p.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in grid.packed_shapes() {
        s.to_bytes(&mut body);
    }
    if let Some(d) = desc {
        for v in &d.values {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt("grid file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<PoseGrid> {
    if bytes.len() < 12 || &bytes[..8] != GRID_MAGIC {
        if bytes.len() >= 6 && &bytes[..6] == b"TLGRID" {
            return Err(Error::VersionMismatch(format!(
                "grid format {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8.min(bytes.len())]),
                String::from_utf8_lossy(GRID_MAGIC)
            )));
        }
        return Err(Error::Corrupt("not a grid file".into()));
    }
    let stored = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let body = &bytes[12..];
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("grid checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Corrupt(format!("grid header: {e}")))?;
    if header.format_version != GRID_FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "grid format version {}, expected {GRID_FORMAT_VERSION}",
            header.format_version
        )));
    }
    let mut poses = Vec::with_capacity(header.pose_count);
    for _ in 0..header.pose_count {
        let mut a = [0.0; 12];
        for v in a.iter_mut() {
            *v = r.f64()?;
        }
        poses.push(Pose::from_array(&a));
    }
    let mut samples = Vec::with_capacity(header.sample_count);
    for _ in 0..header.sample_count {
        samples.push(Vector3::new(r.f64()?, r.f64()?, r.f64()?));
    }
    let mut shapes = Vec::with_capacity(header.pose_count);
    for _ in 0..header.pose_count {
        let (s, used) = PackedShape::from_bytes(&body[r.pos..])?;
        r.pos += used;
        shapes.push(s);
    }
    let descriptors = if header.descriptor_dim > 0 {
        let n = header.descriptor_dim * header.pose_count;
        let raw = r.take(n * 4)?;
        Some(Descriptors {
            dim: header.descriptor_dim,
            encoder_fingerprint: header.encoder_fingerprint.clone().unwrap_or_default(),
            values: raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
        })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after grid".into()));
    }
    let mut grid = PoseGrid::assemble(
        header.sensor,
        header.spec,
        header.mesh_fingerprint,
        poses,
        shapes,
        PointCloud::new(samples),
        Some(header.mean_nn_distance),
    )?;
    if let Some(d) = descriptors {
        grid.set_descriptors(d)?;
    }
    Ok(grid)
}

pub fn save_grid(grid: &PoseGrid, path: &Path) -> Result<()> {
    write_atomic(path, &grid_to_bytes(grid))
}

pub fn load_grid(path: &Path) -> Result<PoseGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    grid_from_bytes(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}
