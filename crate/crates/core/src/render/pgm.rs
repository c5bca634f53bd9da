//! 16-bit PGM contact-shape files with a JSON sidecar, and the packed
//! in-memory form used by pose grids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::render::contact::{dequantize, quantize, NO_CONTACT_CODE};
use crate::render::{ContactShape, SensorModel};

/// Binary PGM (`P5`, maxval 65535, big-endian samples).
pub fn encode_pgm16(width: usize, height: usize, codes: &[u16]) -> Vec<u8> {
    assert_eq!(codes.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    out.reserve(codes.len() * 2);
    for c in codes {
        out.extend_from_slice(&c.to_be_bytes());
    }
    out
}

/// Parses a 16-bit binary PGM; returns `(width, height, samples, bytes consumed)`.
pub fn decode_pgm16(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>, usize)> {
    let corrupt = |m: &str| Error::Corrupt(format!("PGM: {m}"));
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(corrupt("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 65535 {
        return Err(corrupt("expected maxval 65535"));
    }
    // single whitespace byte before the raster
    pos += 1;
    let need = w.checked_mul(h).and_then(|n| n.checked_mul(2)).ok_or_else(|| corrupt("size overflow"))?;
    if bytes.len() < pos + need {
        return Err(corrupt("truncated raster"));
    }
    let codes = bytes[pos..pos + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, codes, pos + need))
}

/// Sidecar metadata stored next to a contact-shape PGM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactShapeMeta {
    pub d_mm: f64,
    pub delta_d_mm: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl ContactShapeMeta {
    pub fn new(sensor: &SensorModel, delta_d: f64) -> Self {
        ContactShapeMeta {
            d_mm: sensor.d,
            delta_d_mm: delta_d,
            fx: sensor.fx,
            fy: sensor.fy,
            cx: sensor.cx,
            cy: sensor.cy,
        }
    }
}

pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

pub fn contact_shape_to_pgm(cs: &ContactShape) -> Vec<u8> {
    let codes: Vec<u16> = cs.values.iter().map(|&v| quantize(v, cs.delta_d)).collect();
    encode_pgm16(cs.width, cs.height, &codes)
}

pub fn contact_shape_from_pgm(bytes: &[u8], delta_d: f64) -> Result<ContactShape> {
    let (width, height, codes, _) = decode_pgm16(bytes)?;
    Ok(ContactShape {
        width,
        height,
        delta_d,
        values: codes.iter().map(|&c| dequantize(c, delta_d)).collect(),
    })
}

/// Writes `<path>` (PGM) and `<path minus extension>.json` (sidecar).
pub fn write_contact_shape(path: &Path, cs: &ContactShape, sensor: &SensorModel) -> Result<()> {
    let meta = ContactShapeMeta::new(sensor, cs.delta_d);
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Numerical(e.to_string()))?;
    write_atomic(path, &contact_shape_to_pgm(cs))?;
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_contact_shape(path: &Path) -> Result<(ContactShape, ContactShapeMeta)> {
    let side = sidecar_path(path);
    let meta_bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: ContactShapeMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Corrupt(format!("{}: {e}", side.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let cs = contact_shape_from_pgm(&bytes, meta.delta_d_mm)?;
    Ok((cs, meta))
}

/// Quantized contact shape cropped to the bounding box of its contact pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedShape {
    pub width: u16,
    pub height: u16,
    /// Contact threshold, stored as raw bits so equality is bit-exact.
    pub delta_d_bits: u64,
    pub x0: u16,
    pub y0: u16,
    pub crop_width: u16,
    pub crop_height: u16,
    pub codes: Vec<u16>,
}

impl PackedShape {
    pub fn pack(cs: &ContactShape) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for v in 0..cs.height {
            for u in 0..cs.width {
                if cs.is_contact(v * cs.width + u) {
                    x0 = x0.min(u);
                    y0 = y0.min(v);
                    x1 = x1.max(u);
                    y1 = y1.max(v);
                }
            }
        }
        let mut packed = PackedShape {
            width: cs.width as u16,
            height: cs.height as u16,
            delta_d_bits: cs.delta_d.to_bits(),
            x0: 0,
            y0: 0,
            crop_width: 0,
            crop_height: 0,
            codes: Vec::new(),
        };
        if x0 == usize::MAX {
            return packed;
        }
        packed.x0 = x0 as u16;
        packed.y0 = y0 as u16;
        packed.crop_width = (x1 - x0 + 1) as u16;
        packed.crop_height = (y1 - y0 + 1) as u16;
        for v in y0..=y1 {
            for u in x0..=x1 {
                packed.codes.push(quantize(cs.values[v * cs.width + u], cs.delta_d));
            }
        }
        packed
    }

    pub fn delta_d(&self) -> f64 {
        f64::from_bits(self.delta_d_bits)
    }

    pub fn unpack(&self) -> ContactShape {
        let (w, h) = (self.width as usize, self.height as usize);
        let dd = self.delta_d();
        let mut cs = ContactShape::empty(w, h, dd);
        for (k, &code) in self.codes.iter().enumerate() {
            let u = self.x0 as usize + k % self.crop_width as usize;
            let v = self.y0 as usize + k / self.crop_width as usize;
            cs.values[v * w + u] = dequantize(code, dd);
        }
        cs
    }

    /// Pixel coordinates of contact pixels.
    pub fn contact_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let cw = self.crop_width.max(1) as usize;
        self.codes
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != NO_CONTACT_CODE)
            .map(move |(k, _)| (self.x0 as usize + k % cw, self.y0 as usize + k / cw))
    }

    pub fn contact_count(&self) -> usize {
        self.codes.iter().filter(|&&c| c != NO_CONTACT_CODE).count()
    }

    pub fn to_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.delta_d_bits.to_le_bytes());
        for v in [self.width, self.height, self.x0, self.y0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&encode_pgm16(self.crop_width as usize, self.crop_height as usize, &self.codes));
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 16 {
            return Err(Error::Corrupt("truncated shape record".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let delta_d_bits = u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
        let (width, height, x0, y0) = (u16_at(8), u16_at(10), u16_at(12), u16_at(14));
        let (cw, ch, codes, used) = decode_pgm16(&bytes[16..])?;
        if x0 as usize + cw > width as usize || y0 as usize + ch > height as usize {
            return Err(Error::Corrupt("shape crop outside image".into()));
        }
        Ok((
            PackedShape {
                width,
                height,
                delta_d_bits,
                x0,
                y0,
                crop_width: cw as u16,
                crop_height: ch as u16,
                codes,
            },
            16 + used,
        ))
    }
}
