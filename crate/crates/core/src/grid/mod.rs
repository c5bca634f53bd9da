//! Dense object-specific grids of contact poses with precomputed contact shapes.

mod metric;
mod spec;
mod store;

use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{hex16, PointCloud, Pose, TriangleMesh};
use crate::render::{ContactShape, MeshRenderer, PackedShape, SensorModel};

pub use metric::pose_distance;
pub(crate) use metric::PoseMetric;
pub use spec::{sample_contact_pose, view_rotation, GridSpec, Symmetry};
pub use store::{grid_from_bytes, grid_to_bytes, load_grid, save_grid, GRID_FORMAT_VERSION, GRID_MAGIC};

/// Surface samples used for distances inside a grid.
pub const GRID_SAMPLE_POINTS: usize = 1000;

/// Per-pose descriptor vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    pub dim: usize,
    /// Fingerprint of the encoder that produced the rows.
    pub encoder_fingerprint: String,
    pub values: Vec<f32>,
}

impl Descriptors {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PoseGrid {
    sensor: SensorModel,
    spec: GridSpec,
    mesh_fingerprint: String,
    poses: Vec<Pose>,
    shapes: Vec<PackedShape>,
    descriptors: Option<Descriptors>,
    /// Descriptors transposed, one contiguous column per dimension.
    columns: Vec<f32>,
    mean_nn_distance: f64,
    metric: PoseMetric,
    signatures: Vec<Vector3<f64>>,
    buckets: CentroidBuckets,
}

/// Poses hashed by where they put the centroid of the surface samples. The
/// mean pose distance is at least the distance between transformed centroids,
/// so a radius query only has to look at nearby cells.
#[derive(Debug, Clone)]
struct CentroidBuckets {
    cell: f64,
    centroids: Vec<Vector3<f64>>,
    cells: HashMap<[i64; 3], Vec<u32>>,
}

impl CentroidBuckets {
    fn new(centroid: &Vector3<f64>, poses: &[Pose], cell: f64) -> Self {
        let centroids: Vec<Vector3<f64>> = poses.iter().map(|p| p.transform_point(centroid)).collect();
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for (i, c) in centroids.iter().enumerate() {
            cells.entry(Self::key(c, cell)).or_default().push(i as u32);
        }
        CentroidBuckets { cell, centroids, cells }
    }

    fn key(c: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [(c.x / cell).floor() as i64, (c.y / cell).floor() as i64, (c.z / cell).floor() as i64]
    }

    /// Indices whose centroid lies within `radius` of `c`, ascending.
    fn within(&self, c: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let reach = (radius / self.cell).ceil() as i64;
        let k = Self::key(c, self.cell);
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(
                            ids.iter()
                                .map(|&i| i as usize)
                                .filter(|&i| (self.centroids[i] - c).norm() <= radius * (1.0 + 1e-9) + 1e-12),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

impl PoseGrid {
    fn assemble(
        sensor: SensorModel,
        spec: GridSpec,
        mesh_fingerprint: String,
        poses: Vec<Pose>,
        shapes: Vec<PackedShape>,
        samples: PointCloud,
        mean_nn_distance: Option<f64>,
    ) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if poses.len() != shapes.len() {
            return Err(Error::InvalidInput("pose and shape counts differ".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("grid needs surface samples".into()));
        }
        let metric = PoseMetric::new(samples);
        let signatures = metric.signatures(&poses);
        let mean_nn_distance =
            mean_nn_distance.unwrap_or_else(|| metric.mean_nearest_neighbor(&poses, &signatures));
        let centroid = metric.samples().centroid().expect("non-empty samples");
        let cell = if mean_nn_distance > 1e-3 { 1.5 * mean_nn_distance } else { 1.0 };
        let buckets = CentroidBuckets::new(&centroid, &poses, cell);
        Ok(PoseGrid {
            sensor,
            spec,
            mesh_fingerprint,
            poses,
            shapes,
            descriptors: None,
            columns: Vec::new(),
            mean_nn_distance,
            metric,
            signatures,
            buckets,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn pose(&self, i: usize) -> &Pose {
        &self.poses[i]
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn shape(&self, i: usize) -> ContactShape {
        self.shapes[i].unpack()
    }

    pub fn packed_shape(&self, i: usize) -> &PackedShape {
        &self.shapes[i]
    }

    pub fn packed_shapes(&self) -> &[PackedShape] {
        &self.shapes
    }

    pub fn sensor(&self) -> &SensorModel {
        &self.sensor
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn mesh_fingerprint(&self) -> &str {
        &self.mesh_fingerprint
    }

    pub fn sample_points(&self) -> &PointCloud {
        self.metric.samples()
    }

    pub fn mean_nn_distance(&self) -> f64 {
        self.mean_nn_distance
    }

    /// Descriptor dimension `j` across all poses.
    pub(crate) fn descriptor_column(&self, j: usize) -> &[f32] {
        let n = self.len();
        &self.columns[j * n..(j + 1) * n]
    }

    pub fn descriptors(&self) -> Option<&Descriptors> {
        self.descriptors.as_ref()
    }

    pub fn set_descriptors(&mut self, descriptors: Descriptors) -> Result<()> {
        if descriptors.dim == 0 || descriptors.values.len() != descriptors.dim * self.len() {
            return Err(Error::InvalidInput(format!(
                "descriptor block has {} values, expected {} x {}",
                descriptors.values.len(),
                self.len(),
                descriptors.dim
            )));
        }
        let n = self.len();
        let mut columns = vec![0.0f32; descriptors.values.len()];
        for (i, row) in descriptors.values.chunks(descriptors.dim).enumerate() {
            for (j, v) in row.iter().enumerate() {
                columns[j * n + i] = *v;
            }
        }
        self.columns = columns;
        self.descriptors = Some(descriptors);
        Ok(())
    }

    pub fn clear_descriptors(&mut self) {
        self.columns = Vec::new();
        self.descriptors = None;
    }

    /// Closest grid pose to `query` and its distance, ties to the lowest index.
    pub fn nearest_pose(&self, query: &Pose) -> (usize, f64) {
        self.metric
            .nearest(&self.poses, &self.signatures, query, None)
            .expect("grid is never empty")
    }

    /// Closest grid pose if it lies within `radius`, otherwise `None`. Agrees
    /// with [`PoseGrid::nearest_pose`] whenever that distance is `<= radius`.
    pub fn nearest_within(&self, query: &Pose, radius: f64) -> Option<(usize, f64)> {
        let c = query.transform_point(&self.metric.samples().centroid().expect("non-empty samples"));
        let candidates = self.buckets.within(&c, radius);
        self.metric.nearest_among(&self.poses, candidates.into_iter(), query, radius)
    }

    /// Closest grid pose other than `index` itself.
    pub fn nearest_other(&self, index: usize) -> Option<(usize, f64)> {
        self.metric.nearest(&self.poses, &self.signatures, &self.poses[index], Some(index))
    }

    pub fn pose_distance(&self, a: &Pose, b: &Pose) -> f64 {
        pose_distance(a, b, self.metric.samples())
    }

    /// Digest of poses and shapes; identifies the grid that descriptors and
    /// posteriors refer to.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.poses {
            for v in p.to_array() {
                h.update(v.to_le_bytes());
            }
        }
        let mut buf = Vec::new();
        for s in &self.shapes {
            buf.clear();
            s.to_bytes(&mut buf);
            h.update(&buf);
        }
        hex16(&h.finalize())
    }
}

/// Canonical key of a pose for de-duplication after the symmetry quotient.
fn pose_key(pose: &Pose) -> [i64; 12] {
    pose.to_array().map(|v| (v * 1e6).round() as i64)
}

/// Enumerates the spec's pose tuples, settles each onto the sensor and keeps
/// those that touch it.
pub fn build_grid(mesh: &TriangleMesh, sensor: &SensorModel, spec: &GridSpec) -> Result<PoseGrid> {
    spec.validate()?;
    sensor.validate()?;
    let renderer = MeshRenderer::new(mesh);
    let z0 = sensor.d + mesh.radius_about_origin() + 1.0;
    let (xs, ys) = (spec.xs(), spec.ys());
    let mut tuples = Vec::new();
    for dir in spec.view_dirs() {
        for roll in spec.rolls() {
            let rot = view_rotation(&dir, roll);
            for &x in &xs {
                for &y in &ys {
                    tuples.push(Pose::new(rot, Vector3::new(x, y, z0)));
                }
            }
        }
    }
    log::info!("grid: {} candidate tuples", tuples.len());
    let rendered: Vec<Option<(Pose, PackedShape)>> = tuples
        .par_iter()
        .map(|start| {
            let start = Pose::new(spec.symmetry.canonicalize(start.rotation()), *start.translation());
            let (pose, _) = renderer.project_to_contact(&start, sensor).ok()?;
            let shape = renderer.render_contact_shape(&pose, sensor, None).ok()?;
            shape.has_contact().then(|| (pose, PackedShape::pack(&shape)))
        })
        .collect();
    let mut seen = HashSet::new();
    let (mut poses, mut shapes) = (Vec::new(), Vec::new());
    for (pose, shape) in rendered.into_iter().flatten() {
        if seen.insert(pose_key(&pose)) {
            poses.push(pose);
            shapes.push(shape);
        }
    }
    log::info!("grid: kept {} of {} tuples", poses.len(), tuples.len());
    let samples = mesh.sample_surface(GRID_SAMPLE_POINTS, spec.seed)?;
    let grid = PoseGrid::assemble(*sensor, spec.clone(), mesh.fingerprint(), poses, shapes, samples, None)?;
    if grid.mean_nn_distance > 2.0 {
        log::warn!("grid mean nearest-neighbour distance {:.3} mm exceeds 2 mm", grid.mean_nn_distance);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn small_spec() -> GridSpec {
        GridSpec {
            x_range: [-2.0, 2.0],
            y_range: [-2.0, 2.0],
            x_step: 2.0,
            y_step: 2.0,
            n_view_dirs: 3,
            n_rolls: 4,
            view_center: [0.0, 0.0, -1.0],
            view_cone_deg: 10.0,
            symmetry: Symmetry::None,
            seed: 1,
        }
    }

    #[test]
    fn built_poses_touch_the_sensor() {
        let mesh = fixtures::asymmetric_prism();
        let sensor = SensorModel::work();
        let grid = build_grid(&mesh, &sensor, &small_spec()).unwrap();
        assert_eq!(grid.len(), 3 * 4 * 9);
        let renderer = MeshRenderer::new(&mesh);
        for i in 0..grid.len() {
            let gap = renderer.contact_gap(grid.pose(i), &sensor).unwrap();
            assert!(gap.abs() <= 1e-6);
            assert!(grid.packed_shape(i).contact_count() >= 1);
        }
        assert_eq!(grid.nearest_pose(grid.pose(17)), (17, 0.0));
    }

    #[test]
    fn no_contact_spec_is_empty_grid() {
        let mesh = fixtures::asymmetric_prism();
        let mut spec = small_spec();
        spec.x_range = [500.0, 500.0];
        assert!(matches!(build_grid(&mesh, &SensorModel::work(), &spec), Err(Error::EmptyGrid)));
    }
}
