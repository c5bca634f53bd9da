use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Pose, PointCloud};

/// Triangles with area at or below this value (mm²) are dropped on construction.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Stl,
    Off,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "obj" => Some(MeshFormat::Obj),
            "stl" => Some(MeshFormat::Stl),
            "off" => Some(MeshFormat::Off),
            _ => None,
        }
    }
}

/// Triangle mesh in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    dropped_degenerate: usize,
}

impl TriangleMesh {
    /// Validates indices and drops degenerate triangles (counted, with a warning).
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(v) = vertices.iter().find(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite vertex {v:?}")));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i as usize >= n)) {
            return Err(Error::InvalidInput(format!(
                "triangle {t:?} references a vertex out of range (have {n})"
            )));
        }
        let before = triangles.len();
        let triangles: Vec<[u32; 3]> = triangles
            .into_iter()
            .filter(|t| triangle_area(&vertices, t) > DEGENERATE_AREA)
            .collect();
        let dropped = before - triangles.len();
        if dropped > 0 {
            log::warn!("dropped {dropped} degenerate triangle(s)");
        }
        if triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        Ok(TriangleMesh {
            vertices,
            triangles,
            dropped_degenerate: dropped,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn dropped_degenerate(&self) -> usize {
        self.dropped_degenerate
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        let t = self.triangles[i];
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        triangle_area(&self.vertices, &self.triangles[i])
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for t in &self.triangles {
            for &i in t {
                let v = &self.vertices[i as usize];
                lo = lo.inf(v);
                hi = hi.sup(v);
            }
        }
        (lo, hi)
    }

    /// Largest distance from the mesh origin to a referenced vertex.
    pub fn radius_about_origin(&self) -> f64 {
        self.triangles
            .iter()
            .flat_map(|t| t.iter())
            .map(|&i| self.vertices[i as usize].norm())
            .fold(0.0, f64::max)
    }

    pub fn transformed(&self, pose: &Pose) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| pose.transform_point(v)).collect(),
            triangles: self.triangles.clone(),
            dropped_degenerate: self.dropped_degenerate,
        }
    }

    pub fn scaled(&self, s: f64) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| v * s).collect(),
            triangles: self.triangles.clone(),
            dropped_degenerate: self.dropped_degenerate,
        }
    }

    /// Concatenates two meshes without welding vertices.
    pub fn merged(&self, other: &TriangleMesh) -> TriangleMesh {
        let offset = self.vertices.len() as u32;
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut triangles = self.triangles.clone();
        triangles.extend(other.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
        TriangleMesh {
            vertices,
            triangles,
            dropped_degenerate: self.dropped_degenerate + other.dropped_degenerate,
        }
    }

    /// Short content hash identifying the geometry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.vertices {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        for t in &self.triangles {
            for i in t {
                h.update(i.to_le_bytes());
            }
        }
        hex16(&h.finalize())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let format = MeshFormat::from_path(path).ok_or_else(|| {
            Error::InvalidInput(format!("cannot infer mesh format from {}", path.display()))
        })?;
        Self::load_as(path, format)
    }

    pub fn load_as(path: &Path, format: MeshFormat) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        match format {
            MeshFormat::Stl => parse_stl(&bytes),
            MeshFormat::Obj | MeshFormat::Off => {
                let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
                    format: if format == MeshFormat::Obj { "OBJ" } else { "OFF" },
                    location: format!("byte {}", e.valid_up_to()),
                    message: "invalid UTF-8".into(),
                })?;
                if format == MeshFormat::Obj {
                    parse_obj(text)
                } else {
                    parse_off(text)
                }
            }
        }
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }

    /// Binary STL encoding (f32 coordinates).
    pub fn to_binary_stl(&self) -> Vec<u8> {
        let mut out = vec![0u8; 80];
        out.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for i in 0..self.triangles.len() {
            let [a, b, c] = self.triangle(i);
            let n = (b - a).cross(&(c - a)).normalize();
            for v in [n, a, b, c] {
                for k in 0..3 {
                    out.extend_from_slice(&(v[k] as f32).to_le_bytes());
                }
            }
            out.extend_from_slice(&[0, 0]);
        }
        out
    }

    /// Area-uniform surface samples: triangle chosen proportional to area,
    /// barycentric-uniform within it.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<PointCloud> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut acc = 0.0;
        for i in 0..self.triangles.len() {
            acc += self.triangle_area(i);
            cumulative.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::EmptyMesh);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let idx = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
                let [a, b, c] = self.triangle(idx);
                let r1 = rng.random::<f64>().sqrt();
                let r2 = rng.random::<f64>();
                a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2)
            })
            .collect();
        Ok(PointCloud::new(points))
    }
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn triangle_area(v: &[Vector3<f64>], t: &[u32; 3]) -> f64 {
    let a = v[t[0] as usize];
    let b = v[t[1] as usize];
    let c = v[t[2] as usize];
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn parse_err(format: &'static str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        format,
        location: format!("line {line}"),
        message: message.into(),
    }
}

fn parse_f64(format: &'static str, line: usize, tok: Option<&str>) -> Result<f64> {
    let tok = tok.ok_or_else(|| parse_err(format, line, "missing coordinate"))?;
    tok.parse::<f64>()
        .map_err(|_| parse_err(format, line, format!("bad number {tok:?}")))
}

/// OBJ reader: `v` and `f` records only; polygons are fan-triangulated.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        let mut toks = body.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64("OBJ", line, toks.next())?;
                let y = parse_f64("OBJ", line, toks.next())?;
                let z = parse_f64("OBJ", line, toks.next())?;
                vertices.push(Vector3::new(x, y, z));
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in toks {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| parse_err("OBJ", line, format!("bad face index {tok:?}")))?;
                    let resolved = if i > 0 {
                        i - 1
                    } else if i < 0 {
                        vertices.len() as i64 + i
                    } else {
                        return Err(parse_err("OBJ", line, "face index 0"));
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(parse_err("OBJ", line, format!("face index {i} out of range")));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(parse_err("OBJ", line, "face with fewer than 3 vertices"));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    TriangleMesh::new(vertices, triangles)
}

/// OFF reader (optionally with comment lines and per-face colours, which are ignored).
pub fn parse_off(text: &str) -> Result<TriangleMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_err("OFF", 1, "empty file"))?;
    let mut counts_line = None;
    if header.starts_with("OFF") {
        let rest = header[3..].trim();
        if !rest.is_empty() {
            counts_line = Some((hline, rest.to_string()));
        }
    } else {
        return Err(parse_err("OFF", hline, "missing OFF header"));
    }
    let (cline, counts) = match counts_line {
        Some(c) => c,
        None => {
            let (l, s) = lines.next().ok_or_else(|| parse_err("OFF", hline + 1, "missing counts"))?;
            (l, s.to_string())
        }
    };
    let nums: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err("OFF", cline, "bad counts"))?;
    if nums.len() < 2 {
        return Err(parse_err("OFF", cline, "expected vertex and face counts"));
    }
    let (nv, nf) = (nums[0], nums[1]);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (l, s) = lines.next().ok_or_else(|| parse_err("OFF", cline, "unexpected end of vertices"))?;
        let mut toks = s.split_whitespace();
        let x = parse_f64("OFF", l, toks.next())?;
        let y = parse_f64("OFF", l, toks.next())?;
        let z = parse_f64("OFF", l, toks.next())?;
        vertices.push(Vector3::new(x, y, z));
    }
    let mut triangles = Vec::new();
    for _ in 0..nf {
        let (l, s) = lines.next().ok_or_else(|| parse_err("OFF", cline, "unexpected end of faces"))?;
        let vals: Vec<i64> = s
            .split_whitespace()
            .map(|t| t.parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err("OFF", l, "bad face record"))?;
        let k = *vals.first().ok_or_else(|| parse_err("OFF", l, "empty face record"))? as usize;
        if k < 3 || vals.len() < k + 1 {
            return Err(parse_err("OFF", l, "face with fewer than 3 vertices"));
        }
        let idx = &vals[1..=k];
        if idx.iter().any(|&i| i < 0 || i as usize >= nv) {
            return Err(parse_err("OFF", l, "face index out of range"));
        }
        for j in 1..k - 1 {
            triangles.push([idx[0] as u32, idx[j] as u32, idx[j + 1] as u32]);
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    TriangleMesh::new(vertices, triangles)
}

/// STL reader, ASCII or binary. Vertices are welded on exact coordinate equality.
pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh> {
    let is_binary = bytes.len() >= 84 && {
        let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
        84usize.checked_add(n.saturating_mul(50)) == Some(bytes.len())
    };
    let mut welder = Welder::default();
    let mut triangles = Vec::new();
    if is_binary {
        let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
        for i in 0..n {
            let rec = &bytes[84 + i * 50..84 + (i + 1) * 50];
            let mut tri = [0u32; 3];
            for (k, slot) in tri.iter_mut().enumerate() {
                let off = 12 + k * 12;
                let c = |j: usize| {
                    let b = &rec[off + 4 * j..off + 4 * j + 4];
                    f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64
                };
                *slot = welder.index(Vector3::new(c(0), c(1), c(2)));
            }
            triangles.push(tri);
        }
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            format: "STL",
            location: format!("byte {}", e.valid_up_to()),
            message: "neither valid binary nor ASCII STL".into(),
        })?;
        if !text.trim_start().starts_with("solid") {
            return Err(Error::Parse {
                format: "STL",
                location: "byte 0".into(),
                message: "missing 'solid' header and size does not match binary layout".into(),
            });
        }
        let mut current = Vec::with_capacity(3);
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let mut toks = raw.split_whitespace();
            match toks.next() {
                Some("vertex") => {
                    let x = parse_f64("STL", line, toks.next())?;
                    let y = parse_f64("STL", line, toks.next())?;
                    let z = parse_f64("STL", line, toks.next())?;
                    current.push(welder.index(Vector3::new(x, y, z)));
                }
                Some("endloop") => {
                    if current.len() != 3 {
                        return Err(parse_err("STL", line, "facet without exactly 3 vertices"));
                    }
                    triangles.push([current[0], current[1], current[2]]);
                    current.clear();
                }
                _ => {}
            }
        }
    }
    if triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    TriangleMesh::new(welder.vertices, triangles)
}

#[derive(Default)]
struct Welder {
    map: HashMap<[u64; 3], u32>,
    vertices: Vec<Vector3<f64>>,
}

impl Welder {
    fn index(&mut self, v: Vector3<f64>) -> u32 {
        // +0.0 and -0.0 weld together
        let key = [(v.x + 0.0).to_bits(), (v.y + 0.0).to_bits(), (v.z + 0.0).to_bits()];
        *self.map.entry(key).or_insert_with(|| {
            self.vertices.push(v);
            (self.vertices.len() - 1) as u32
        })
    }
}
