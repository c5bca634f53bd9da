//! Python bindings. Images travel as flat row-major lists of floats and
//! option structs as JSON strings with the same keys as the CLI config.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;
use touchloc::evaluation::NoiseModel;
use touchloc::grid::GridSpec;
use touchloc::posterior::{FusionOptions, PriorSpec, SensorMount, SensorRig};
use touchloc::registration::RegistrationParams;
use touchloc::similarity::{encode_grid, TrainConfig};
use touchloc::{render, ErrorClass};

fn err(e: touchloc::Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config | ErrorClass::Geometry => PyValueError::new_err(msg),
        ErrorClass::Io => PyOSError::new_err(msg),
        ErrorClass::Numerical => PyArithmeticError::new_err(msg),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

#[pyclass(name = "SensorModel", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PySensor(touchloc::SensorModel);

#[pymethods]
impl PySensor {
    /// Full-resolution sensor.
    #[staticmethod]
    fn native() -> Self {
        PySensor(touchloc::SensorModel::native())
    }

    /// Working resolution used by the grids.
    #[staticmethod]
    fn work() -> Self {
        PySensor(touchloc::SensorModel::work())
    }

    fn rescaled(&self, width: usize, height: usize) -> Self {
        PySensor(self.0.rescaled(width, height))
    }

    fn with_delta_d(&self, delta_d: f64) -> PyResult<Self> {
        let s = self.0.with_delta_d(delta_d);
        s.validate().map_err(err)?;
        Ok(PySensor(s))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn d(&self) -> f64 {
        self.0.d
    }

    #[getter]
    fn delta_d(&self) -> f64 {
        self.0.delta_d
    }

    /// `(fx, fy, cx, cy)` in pixels.
    #[getter]
    fn intrinsics(&self) -> (f64, f64, f64, f64) {
        (self.0.fx, self.0.fy, self.0.cx, self.0.cy)
    }

    fn __repr__(&self) -> String {
        format!("SensorModel({}x{}, d={}, delta_d={})", self.0.width, self.0.height, self.0.d, self.0.delta_d)
    }
}

#[pyclass(name = "Pose", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyPose(touchloc::Pose);

#[pymethods]
impl PyPose {
    /// Quaternion is `(w, x, y, z)`; it is normalized.
    #[new]
    #[pyo3(signature = (translation = [0.0; 3], quaternion = [1.0, 0.0, 0.0, 0.0]))]
    fn new(translation: [f64; 3], quaternion: [f64; 4]) -> PyResult<Self> {
        touchloc::Pose::from_quaternion(quaternion, translation.into()).map(PyPose).map_err(err)
    }

    #[staticmethod]
    fn identity() -> Self {
        PyPose(touchloc::Pose::identity())
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        let t = self.0.translation();
        [t.x, t.y, t.z]
    }

    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        self.0.quaternion()
    }

    /// 4x4 homogeneous matrix as nested lists.
    fn matrix(&self) -> Vec<Vec<f64>> {
        let r = self.0.rotation();
        let t = self.0.translation();
        let mut m: Vec<Vec<f64>> = (0..3).map(|i| vec![r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]]).collect();
        m.push(vec![0.0, 0.0, 0.0, 1.0]);
        m
    }

    /// `self * other`: apply `other` first.
    fn compose(&self, other: PyRef<'_, PyPose>) -> Self {
        PyPose(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        PyPose(self.0.inverse())
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.0.transform_point(&p.into());
        [q.x, q.y, q.z]
    }

    /// Rotation angle between the two poses, radians.
    fn angle_to(&self, other: PyRef<'_, PyPose>) -> f64 {
        self.0.angle_to(&other.0)
    }

    fn __repr__(&self) -> String {
        format!("Pose(translation={:?}, quaternion={:?})", self.translation(), self.quaternion())
    }
}

#[pyclass(name = "TriangleMesh", frozen, skip_from_py_object)]
struct PyMesh(Arc<touchloc::TriangleMesh>);

#[pymethods]
impl PyMesh {
    /// OBJ, OFF or STL, chosen by extension.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        touchloc::TriangleMesh::load(&path).map(|m| PyMesh(Arc::new(m))).map_err(err)
    }

    #[staticmethod]
    fn from_arrays(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> PyResult<Self> {
        let v = vertices.into_iter().map(Into::into).collect();
        touchloc::TriangleMesh::new(v, triangles).map(|m| PyMesh(Arc::new(m))).map_err(err)
    }

    #[staticmethod]
    fn asymmetric_prism() -> Self {
        PyMesh(Arc::new(touchloc::fixtures::asymmetric_prism()))
    }

    #[staticmethod]
    fn keyed_block() -> Self {
        PyMesh(Arc::new(touchloc::fixtures::keyed_block()))
    }

    #[staticmethod]
    #[pyo3(signature = (radius, subdivisions = 4, center = [0.0; 3]))]
    fn icosphere(radius: f64, subdivisions: u32, center: [f64; 3]) -> Self {
        PyMesh(Arc::new(touchloc::fixtures::icosphere(radius, subdivisions, center.into())))
    }

    fn scaled(&self, s: f64) -> Self {
        PyMesh(Arc::new(self.0.scaled(s)))
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.0.vertices().len()
    }

    #[getter]
    fn n_triangles(&self) -> usize {
        self.0.triangles().len()
    }

    fn surface_area(&self) -> f64 {
        self.0.surface_area()
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    fn to_obj(&self) -> String {
        self.0.to_obj()
    }
}

#[pyclass(name = "ContactShape", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyContactShape(touchloc::ContactShape);

#[pymethods]
impl PyContactShape {
    /// Row-major depths in `[0, delta_d]`; `delta_d` marks no contact.
    #[new]
    fn new(width: usize, height: usize, delta_d: f64, values: Vec<f64>) -> PyResult<Self> {
        if values.len() != width * height {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", width * height, values.len())));
        }
        if !(delta_d > 0.0) || values.iter().any(|v| !(0.0..=delta_d).contains(v)) {
            return Err(PyValueError::new_err("values must lie in [0, delta_d] with delta_d > 0"));
        }
        let mut cs = touchloc::ContactShape::empty(width, height, delta_d);
        cs.values = values;
        Ok(PyContactShape(cs))
    }

    /// Reads a 16-bit PGM and its JSON sidecar.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        render::read_contact_shape(&path).map(|(cs, _)| PyContactShape(cs)).map_err(err)
    }

    fn write(&self, path: PathBuf, sensor: PyRef<'_, PySensor>) -> PyResult<()> {
        render::write_contact_shape(&path, &self.0, &sensor.0).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn delta_d(&self) -> f64 {
        self.0.delta_d
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    fn contact_count(&self) -> usize {
        self.0.contact_count()
    }

    /// Back-projected contact points in the sensor frame.
    fn to_points(&self, sensor: PyRef<'_, PySensor>) -> PyResult<Vec<[f64; 3]>> {
        let cloud = self.0.to_pointcloud(&sensor.0).map_err(err)?;
        Ok(cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect())
    }
}

#[pyclass(name = "MeshRenderer", frozen, skip_from_py_object)]
struct PyRenderer(touchloc::MeshRenderer);

#[pymethods]
impl PyRenderer {
    #[new]
    fn new(mesh: PyRef<'_, PyMesh>) -> Self {
        PyRenderer(touchloc::MeshRenderer::new(&mesh.0))
    }

    /// Depth along the optical axis per pixel; `inf` where nothing is hit.
    fn render_depth(&self, py: Python<'_>, pose: PyRef<'_, PyPose>, sensor: PyRef<'_, PySensor>) -> Vec<f64> {
        let (p, s) = (pose.0, sensor.0);
        py.detach(|| self.0.render_depth(&p, &s).depth)
    }

    /// Slides the pose along the optical axis until it touches the gel.
    /// Returns the moved pose and the shift in mm.
    fn project_to_contact(&self, pose: PyRef<'_, PyPose>, sensor: PyRef<'_, PySensor>) -> PyResult<(PyPose, f64)> {
        self.0.project_to_contact(&pose.0, &sensor.0).map(|(p, dz)| (PyPose(p), dz)).map_err(err)
    }

    #[pyo3(signature = (pose, sensor, delta_d = None))]
    fn render_contact_shape(
        &self,
        py: Python<'_>,
        pose: PyRef<'_, PyPose>,
        sensor: PyRef<'_, PySensor>,
        delta_d: Option<f64>,
    ) -> PyResult<PyContactShape> {
        let (p, s) = (pose.0, sensor.0);
        py.detach(|| self.0.render_contact_shape(&p, &s, delta_d)).map(PyContactShape).map_err(err)
    }
}

#[pyclass(name = "Encoder", frozen, skip_from_py_object)]
struct PyEncoder(Arc<touchloc::similarity::Encoder>);

#[pymethods]
impl PyEncoder {
    /// Fixed descriptor: the downsampled contact mask.
    #[staticmethod]
    #[pyo3(signature = (temperature = 0.07))]
    fn baseline(temperature: f64) -> PyResult<Self> {
        let enc = touchloc::similarity::Encoder::baseline(temperature);
        enc.validate().map_err(err)?;
        Ok(PyEncoder(Arc::new(enc)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        touchloc::similarity::Encoder::load(&path).map(|e| PyEncoder(Arc::new(e))).map_err(err)
    }

    /// Contrastive training on renders of the grid's poses.
    #[staticmethod]
    #[pyo3(signature = (grid, mesh, config_json = None))]
    fn train(py: Python<'_>, grid: PyRef<'_, PyGrid>, mesh: PyRef<'_, PyMesh>, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: TrainConfig = from_json(config_json)?;
        let (g, m) = (grid.0.clone(), mesh.0.clone());
        py.detach(|| touchloc::similarity::train_contrastive(&g, &m, g.sensor(), &cfg))
            .map(|e| PyEncoder(Arc::new(e)))
            .map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn encode(&self, shape: PyRef<'_, PyContactShape>) -> Vec<f64> {
        self.0.encode(&shape.0)
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.0.temperature
    }

    /// `(epoch, mean_loss, top1_acc)` per training epoch.
    #[getter]
    fn loss_curve(&self) -> Vec<(usize, f64, f64)> {
        self.0.loss_curve.iter().map(|s| (s.epoch, s.mean_loss, s.top1_acc)).collect()
    }
}

#[pyclass(name = "PoseGrid", frozen, skip_from_py_object)]
struct PyGrid(Arc<touchloc::grid::PoseGrid>);

#[pymethods]
impl PyGrid {
    /// `spec_json` holds the grid section of a run config.
    #[staticmethod]
    fn build(py: Python<'_>, mesh: PyRef<'_, PyMesh>, sensor: PyRef<'_, PySensor>, spec_json: &str) -> PyResult<Self> {
        let spec: GridSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let (m, s) = (mesh.0.clone(), sensor.0);
        py.detach(|| touchloc::grid::build_grid(&m, &s, &spec)).map(|g| PyGrid(Arc::new(g))).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        touchloc::grid::load_grid(&path).map(|g| PyGrid(Arc::new(g))).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        touchloc::grid::save_grid(&self.0, &path).map_err(err)
    }

    /// Copy of the grid carrying this encoder's descriptors.
    fn encoded(&self, py: Python<'_>, encoder: PyRef<'_, PyEncoder>) -> PyResult<Self> {
        let enc = encoder.0.clone();
        let mut g = (*self.0).clone();
        py.detach(|| {
            let d = encode_grid(&enc, &g);
            g.set_descriptors(d)
        })
        .map_err(err)?;
        Ok(PyGrid(Arc::new(g)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn pose(&self, i: usize) -> PyResult<PyPose> {
        self.check(i)?;
        Ok(PyPose(*self.0.pose(i)))
    }

    fn shape(&self, i: usize) -> PyResult<PyContactShape> {
        self.check(i)?;
        Ok(PyContactShape(self.0.shape(i)))
    }

    /// `(index, distance)` of the closest grid pose.
    fn nearest_pose(&self, pose: PyRef<'_, PyPose>) -> (usize, f64) {
        self.0.nearest_pose(&pose.0)
    }

    /// Mean surface-point distance between two poses, mm.
    fn pose_distance(&self, a: PyRef<'_, PyPose>, b: PyRef<'_, PyPose>) -> f64 {
        self.0.pose_distance(&a.0, &b.0)
    }

    fn mean_nn_distance(&self) -> f64 {
        self.0.mean_nn_distance()
    }

    #[getter]
    fn sensor(&self) -> PySensor {
        PySensor(*self.0.sensor())
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }
}

impl PyGrid {
    fn check(&self, i: usize) -> PyResult<()> {
        if i >= self.0.len() {
            return Err(PyIndexError::new_err(format!("pose {i} out of range ({} poses)", self.0.len())));
        }
        Ok(())
    }
}

#[pyclass(name = "PosePosterior", frozen, skip_from_py_object)]
struct PyPosterior(touchloc::posterior::PosePosterior);

#[pymethods]
impl PyPosterior {
    #[getter]
    fn log_prob(&self) -> Vec<f64> {
        self.0.log_prob.clone()
    }

    fn probabilities(&self) -> Vec<f64> {
        self.0.probabilities()
    }

    /// `(index, probability)` of the `k` most likely poses.
    fn best_k(&self, k: usize) -> Vec<(usize, f64)> {
        self.0.best_k(k)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Posterior over the grid's poses for one contact shape.
#[pyfunction]
fn localize(
    py: Python<'_>,
    query: PyRef<'_, PyContactShape>,
    grid: PyRef<'_, PyGrid>,
    encoder: PyRef<'_, PyEncoder>,
) -> PyResult<PyPosterior> {
    let (q, g, e) = (query.0.clone(), grid.0.clone(), encoder.0.clone());
    py.detach(|| touchloc::posterior::single_contact_posterior(&q, &g, &e)).map(PyPosterior).map_err(err)
}

/// Fused posterior over the first grid. Sensor `i` has its own grid and
/// sits at `extrinsics[i]` in the frame of sensor 0; an empty query means
/// that sensor is not touching.
#[pyfunction]
#[pyo3(signature = (grids, extrinsics, queries, encoder, contact_factor = 1.5))]
fn fuse(
    py: Python<'_>,
    grids: Vec<PyRef<'_, PyGrid>>,
    extrinsics: Vec<PyRef<'_, PyPose>>,
    queries: Vec<PyRef<'_, PyContactShape>>,
    encoder: PyRef<'_, PyEncoder>,
    contact_factor: f64,
) -> PyResult<PyPosterior> {
    if grids.len() != extrinsics.len() {
        return Err(PyValueError::new_err("one extrinsic per grid is required"));
    }
    let grids: Vec<_> = grids.iter().map(|g| g.0.clone()).collect();
    let mounts = grids.iter().zip(&extrinsics).map(|(g, x)| SensorMount { sensor: *g.sensor(), extrinsic: x.0 }).collect();
    let shapes: Vec<_> = queries.iter().map(|q| q.0.clone()).collect();
    let enc = encoder.0.clone();
    let opts = FusionOptions { contact_factor, ..FusionOptions::default() };
    py.detach(|| {
        let rig = SensorRig::new(mounts, grids)?;
        touchloc::posterior::fuse_multi_contact(&rig, &shapes, &enc, &PriorSpec::default(), &opts)
    })
    .map(PyPosterior)
    .map_err(err)
}

/// Refines grid pose `index` against the query by rigid registration.
/// Returns the refined pose and the per-iteration objective.
#[pyfunction]
#[pyo3(signature = (grid, index, query, params_json = None))]
fn refine(
    py: Python<'_>,
    grid: PyRef<'_, PyGrid>,
    index: usize,
    query: PyRef<'_, PyContactShape>,
    params_json: Option<&str>,
) -> PyResult<(PyPose, Vec<f64>)> {
    let params: RegistrationParams = from_json(params_json)?;
    let (g, q) = (grid.0.clone(), query.0.clone());
    let (pose, result) = py.detach(|| touchloc::registration::refine_pose(&g, index, &q, g.sensor(), &params)).map_err(err)?;
    Ok((PyPose(pose), result.objective))
}

/// Mean distance between corresponding surface samples, mm.
#[pyfunction]
#[pyo3(signature = (a, b, mesh, n = 1000, seed = 0))]
fn add_error(a: PyRef<'_, PyPose>, b: PyRef<'_, PyPose>, mesh: PyRef<'_, PyMesh>, n: usize, seed: u64) -> PyResult<f64> {
    touchloc::evaluation::add_error(&a.0, &b.0, &mesh.0, n, seed).map_err(err)
}

/// Noisy rendered query at `pose`; `noise_json` as the config's noise section.
#[pyfunction]
#[pyo3(signature = (renderer, sensor, pose, noise_json = None))]
fn synth_query(
    renderer: PyRef<'_, PyRenderer>,
    sensor: PyRef<'_, PySensor>,
    pose: PyRef<'_, PyPose>,
    noise_json: Option<&str>,
) -> PyResult<PyContactShape> {
    let noise: NoiseModel = from_json(noise_json)?;
    touchloc::evaluation::synth_query(&renderer.0, &sensor.0, &pose.0, &noise).map(PyContactShape).map_err(err)
}

#[pymodule]
fn pytouchloc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySensor>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyContactShape>()?;
    m.add_class::<PyRenderer>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(add_error, m)?)?;
    m.add_function(wrap_pyfunction!(synth_query, m)?)?;
    Ok(())
}
