use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use touchloc::evaluation::NoiseModel;
use touchloc::geometry::PoseRecord;
use touchloc::grid::GridSpec;
use touchloc::registration::RegistrationParams;
use touchloc::similarity::TrainConfig;
use touchloc::{Error, Result, SensorModel};

/// Sensor overrides on top of the GelSlim-like defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Render resolution `[width, height]`; intrinsics scale with it.
    pub resolution: [usize; 2],
    /// Contact threshold in mm; the default is the sensor's.
    pub delta_d: Option<f64>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        let w = SensorModel::work();
        SensorConfig { resolution: [w.width, w.height], delta_d: None }
    }
}

impl SensorConfig {
    pub fn model(&self) -> Result<SensorModel> {
        let [w, h] = self.resolution;
        if w == 0 || h == 0 {
            return Err(Error::InvalidConfig("sensor resolution must be positive".into()));
        }
        let mut s = SensorModel::native().rescaled(w, h);
        if let Some(dd) = self.delta_d {
            s = s.with_delta_d(dd);
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    Baseline,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderChoice,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Trained encoder file; `<output_dir>/encoder.bin` when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_temperature() -> f64 {
    0.07
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { kind: EncoderChoice::Baseline, temperature: 0.07, path: None, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_random_trials")]
    pub random_trials: usize,
    #[serde(default = "default_trials")]
    pub n_examples: usize,
    #[serde(default = "default_contacts")]
    pub max_contacts: usize,
    /// Grids of sensors 2.. in their own frames (multi-contact only).
    #[serde(default)]
    pub sensor_grids: Vec<GridSpec>,
    #[serde(default = "uniform")]
    pub task_prior: String,
    #[serde(default = "uniform")]
    pub train_prior: String,
    #[serde(default = "default_contact_factor")]
    pub contact_factor: f64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_trials() -> usize {
    100
}

fn default_methods() -> Vec<String> {
    ["Best-1", "Reg-1", "Best-10", "Reg-10", "Best-50", "random"].iter().map(|s| s.to_string()).collect()
}

fn default_random_trials() -> usize {
    1000
}

fn default_contacts() -> usize {
    7
}

fn uniform() -> String {
    "uniform".into()
}

fn default_contact_factor() -> f64 {
    1.5
}

fn default_bins() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub pose: PoseRecord,
    /// Move the pose along the camera axis into contact before rendering.
    #[serde(default = "yes")]
    pub project_to_contact: bool,
    #[serde(default)]
    pub delta_d: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizeConfig {
    /// Query contact shape (PGM with JSON sidecar).
    pub query: PathBuf,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Refine the top candidates by registration.
    #[serde(default)]
    pub refine: bool,
}

fn default_top_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseSensor {
    /// Grid file of this sensor; sensor 1 may omit it to use the run's grid.
    #[serde(default)]
    pub grid: Option<PathBuf>,
    /// Pose of this sensor in the frame of sensor 1; identity when absent.
    #[serde(default)]
    pub extrinsic: Option<PoseRecord>,
    pub query: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseConfig {
    pub sensors: Vec<FuseSensor>,
    #[serde(default = "uniform")]
    pub task_prior: String,
    #[serde(default = "uniform")]
    pub train_prior: String,
    #[serde(default = "default_contact_factor")]
    pub contact_factor: f64,
    #[serde(default)]
    pub exclusion_log_floor: Option<f64>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

/// One JSON document drives every command. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: PathBuf,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Grid file; `<output_dir>/grid.tlg` when absent.
    #[serde(default)]
    pub grid_file: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub registration: RegistrationParams,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub render: Option<RenderConfig>,
    #[serde(default)]
    pub localize: Option<LocalizeConfig>,
    #[serde(default)]
    pub fuse: Option<FuseConfig>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.mesh);
        fix(&mut self.output_dir);
        if let Some(p) = self.grid_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.encoder.path.as_mut() {
            fix(p);
        }
        if let Some(l) = self.localize.as_mut() {
            fix(&mut l.query);
        }
        if let Some(f) = self.fuse.as_mut() {
            for s in &mut f.sensors {
                fix(&mut s.query);
                if let Some(g) = s.grid.as_mut() {
                    fix(g);
                }
            }
            for prior in [&mut f.task_prior, &mut f.train_prior] {
                if prior != "uniform" {
                    *prior = base.join(&*prior).to_string_lossy().into_owned();
                }
            }
        }
        if let Some(e) = self.experiment.as_mut() {
            for prior in [&mut e.task_prior, &mut e.train_prior] {
                if prior != "uniform" {
                    *prior = base.join(&*prior).to_string_lossy().into_owned();
                }
            }
        }
    }

    /// Applies the run seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encoder.train.seed = seed;
        self.noise.seed = seed;
        self.registration.seed = seed;
        self
    }

    pub fn grid_path(&self) -> PathBuf {
        self.grid_file.clone().unwrap_or_else(|| self.output_dir.join("grid.tlg"))
    }

    pub fn encoder_path(&self) -> PathBuf {
        self.encoder.path.clone().unwrap_or_else(|| self.output_dir.join("encoder.bin"))
    }

    pub fn grid_spec(&self) -> Result<&GridSpec> {
        self.grid.as_ref().ok_or_else(|| Error::InvalidConfig("config has no \"grid\" section".into()))
    }
}
