use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::Serialize;
use touchloc::evaluation::{
    run_multi_contact_experiment, run_single_contact_experiment, ExperimentReport, Method, MultiContactSetup,
    SingleContactSetup,
};
use touchloc::geometry::PoseRecord;
use touchloc::grid::{build_grid as build, load_grid, save_grid, GridSpec, PoseGrid};
use touchloc::io::write_atomic;
use touchloc::posterior::{
    fuse_multi_contact, single_contact_posterior, FusionOptions, PosePosterior, Prior, PriorSpec, SensorMount,
    SensorRig,
};
use touchloc::registration::refine_pose;
use touchloc::render::{read_contact_shape, write_contact_shape, DepthImage};
use touchloc::similarity::{encode_grid, loss_curve_csv, train_contrastive, Encoder};
use touchloc::{ContactShape, Error, MeshRenderer, Pose, Result, SensorModel, TriangleMesh};

use crate::config::{EncoderChoice, ExperimentKind, RunConfig};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))? + "\n";
    write_atomic(path, text.as_bytes())
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    write_json(&cfg.output_dir.join("resolved_config.json"), cfg)
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| Error::InvalidConfig(format!("config has no \"{name}\" section")))
}

/// Portable float map, little endian, rows bottom to top. Pixels that see
/// no surface hold `inf`.
fn depth_to_pfm(img: &DepthImage) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for v in (0..img.height).rev() {
        for u in 0..img.width {
            out.extend_from_slice(&(img.at(u, v) as f32).to_le_bytes());
        }
    }
    out
}

fn encoder(cfg: &RunConfig) -> Result<Encoder> {
    match cfg.encoder.kind {
        EncoderChoice::Baseline => Ok(Encoder::baseline(cfg.encoder.temperature)),
        EncoderChoice::Linear => Encoder::load(&cfg.encoder_path()),
    }
}

/// Grid carrying descriptors of `enc`, encoding it when needed.
fn encoded(mut grid: PoseGrid, enc: &Encoder) -> Result<PoseGrid> {
    let current = grid.descriptors().map(|d| d.encoder_fingerprint.clone());
    if current.as_deref() != Some(enc.fingerprint().as_str()) {
        info!("encoding {} grid poses", grid.len());
        grid.set_descriptors(encode_grid(enc, &grid))?;
    }
    Ok(grid)
}

fn read_query(path: &Path, sensor: &SensorModel) -> Result<ContactShape> {
    let (cs, _) = read_contact_shape(path)?;
    if (cs.width, cs.height) != (sensor.width, sensor.height) {
        return Err(Error::InvalidInput(format!(
            "query {} is {}x{}, the grid renders {}x{}",
            path.display(),
            cs.width,
            cs.height,
            sensor.width,
            sensor.height
        )));
    }
    Ok(cs)
}

fn pose_cols(p: &Pose) -> String {
    let t = p.translation();
    let q = p.quaternion();
    format!("{},{},{},{},{},{},{}", t.x, t.y, t.z, q[0], q[1], q[2], q[3])
}

fn top_k_table(post: &PosePosterior, grid: &PoseGrid, k: usize, refined: Option<&[Pose]>) -> String {
    let mut out = String::from("rank,index,probability,x,y,z,qw,qx,qy,qz");
    if refined.is_some() {
        out.push_str(",ref_x,ref_y,ref_z,ref_qw,ref_qx,ref_qy,ref_qz");
    }
    out.push('\n');
    for (rank, (i, p)) in post.best_k(k).into_iter().enumerate() {
        let _ = write!(out, "{},{i},{p},{}", rank + 1, pose_cols(grid.pose(i)));
        if let Some(r) = refined {
            let _ = write!(out, ",{}", pose_cols(&r[rank]));
        }
        out.push('\n');
    }
    out
}

pub fn render(cfg: &RunConfig) -> Result<()> {
    let rc = section(&cfg.render, "render")?;
    let mesh = TriangleMesh::load(&cfg.mesh)?;
    let sensor = cfg.sensor.model()?;
    let renderer = MeshRenderer::new(&mesh);
    let mut pose = Pose::try_from(rc.pose)?;
    if rc.project_to_contact {
        pose = renderer.project_to_contact(&pose, &sensor)?.0;
    }
    let shape = renderer.render_contact_shape(&pose, &sensor, rc.delta_d)?;
    let depth = renderer.render_depth(&pose, &sensor);
    write_atomic(&cfg.output_dir.join("depth.pfm"), &depth_to_pfm(&depth))?;
    write_contact_shape(&cfg.output_dir.join("contact.pgm"), &shape, &sensor)?;
    write_json(&cfg.output_dir.join("pose.json"), &PoseRecord::from(&pose))?;
    write_resolved(cfg)?;
    info!("{} contact pixels", shape.contact_count());
    Ok(())
}

#[derive(Serialize)]
struct GridSummary {
    poses: usize,
    mean_nn_distance: f64,
    fingerprint: String,
    encoder_fingerprint: Option<String>,
}

pub fn build_grid(cfg: &RunConfig) -> Result<()> {
    let mesh = TriangleMesh::load(&cfg.mesh)?;
    let sensor = cfg.sensor.model()?;
    let mut grid = build(&mesh, &sensor, cfg.grid_spec()?)?;
    let enc = match cfg.encoder.kind {
        EncoderChoice::Baseline => Some(encoder(cfg)?),
        // a trained encoder may not exist yet; encode later
        EncoderChoice::Linear => cfg.encoder_path().exists().then(|| encoder(cfg)).transpose()?,
    };
    if let Some(enc) = &enc {
        grid = encoded(grid, enc)?;
    }
    save_grid(&grid, &cfg.grid_path())?;
    let summary = GridSummary {
        poses: grid.len(),
        mean_nn_distance: grid.mean_nn_distance(),
        fingerprint: grid.fingerprint(),
        encoder_fingerprint: enc.map(|e| e.fingerprint()),
    };
    write_json(&cfg.output_dir.join("grid_summary.json"), &summary)?;
    write_resolved(cfg)?;
    info!("{} poses, mean nearest-neighbour distance {:.3} mm", grid.len(), grid.mean_nn_distance());
    Ok(())
}

pub fn train_encoder(cfg: &RunConfig) -> Result<()> {
    let mesh = TriangleMesh::load(&cfg.mesh)?;
    let grid = load_grid(&cfg.grid_path())?;
    let enc = train_contrastive(&grid, &mesh, grid.sensor(), &cfg.encoder.train)?;
    enc.save(&cfg.encoder_path())?;
    write_atomic(&cfg.output_dir.join("loss_curve.csv"), loss_curve_csv(&enc.loss_curve).as_bytes())?;
    write_resolved(cfg)
}

pub fn localize(cfg: &RunConfig) -> Result<()> {
    let lc = section(&cfg.localize, "localize")?;
    let enc = encoder(cfg)?;
    let grid = encoded(load_grid(&cfg.grid_path())?, &enc)?;
    let query = read_query(&lc.query, grid.sensor())?;
    let post = single_contact_posterior(&query, &grid, &enc)?;
    let refined: Option<Vec<Pose>> = lc
        .refine
        .then(|| {
            post.best_k(lc.top_k)
                .into_iter()
                .map(|(i, _)| refine_pose(&grid, i, &query, grid.sensor(), &cfg.registration).map(|r| r.0))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    write_atomic(&cfg.output_dir.join("posterior.csv"), post.to_csv(&grid).as_bytes())?;
    write_atomic(&cfg.output_dir.join("top_k.csv"), top_k_table(&post, &grid, lc.top_k, refined.as_deref()).as_bytes())?;
    write_resolved(cfg)
}

pub fn fuse(cfg: &RunConfig) -> Result<()> {
    let fc = section(&cfg.fuse, "fuse")?;
    if fc.sensors.is_empty() {
        return Err(Error::InvalidConfig("fuse: at least one sensor is required".into()));
    }
    let enc = encoder(cfg)?;
    let mut loaded: Vec<(PathBuf, Arc<PoseGrid>)> = Vec::new();
    let mut grids = Vec::new();
    let mut mounts = Vec::new();
    let mut shapes = Vec::new();
    for (i, s) in fc.sensors.iter().enumerate() {
        let path = match (&s.grid, i) {
            (Some(p), _) => p.clone(),
            (None, 0) => cfg.grid_path(),
            (None, _) => return Err(Error::InvalidConfig(format!("fuse: sensor {} needs a grid file", i + 1))),
        };
        let grid = match loaded.iter().find(|(p, _)| *p == path) {
            Some((_, g)) => g.clone(),
            None => {
                let g = Arc::new(encoded(load_grid(&path)?, &enc)?);
                loaded.push((path, g.clone()));
                g
            }
        };
        let extrinsic = s.extrinsic.map(Pose::try_from).transpose()?.unwrap_or_else(Pose::identity);
        shapes.push(read_query(&s.query, grid.sensor())?);
        mounts.push(SensorMount { sensor: *grid.sensor(), extrinsic });
        grids.push(grid);
    }
    let n = grids[0].len();
    let priors = PriorSpec { task: Prior::parse(&fc.task_prior, n)?, train: Prior::parse(&fc.train_prior, n)? };
    let opts = FusionOptions { contact_factor: fc.contact_factor, exclusion_log_floor: fc.exclusion_log_floor };
    let rig = SensorRig::new(mounts, grids)?;
    let post = fuse_multi_contact(&rig, &shapes, &enc, &priors, &opts)?;
    let g1 = &rig.grids[0];
    write_atomic(&cfg.output_dir.join("fused_posterior.csv"), post.to_csv(g1).as_bytes())?;
    write_atomic(&cfg.output_dir.join("top_k.csv"), top_k_table(&post, g1, fc.top_k, None).as_bytes())?;
    write_resolved(cfg)
}

fn write_report(cfg: &RunConfig, report: &ExperimentReport, bins: usize) -> Result<()> {
    write_atomic(&cfg.output_dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(&cfg.output_dir.join("summary.json"), report.summary_json().as_bytes())?;
    write_atomic(&cfg.output_dir.join("histograms.dat"), report.histograms(bins, 2.0).as_bytes())?;
    write_resolved(cfg)
}

fn experiment_grid(cfg: &RunConfig, mesh: &TriangleMesh, sensor: &SensorModel, enc: &Encoder) -> Result<PoseGrid> {
    let grid = match &cfg.grid_file {
        Some(path) => {
            let g = load_grid(path)?;
            if cfg.grid.as_ref().is_some_and(|s| s != g.spec()) {
                return Err(Error::InvalidConfig(format!("{} was built from a different grid spec", path.display())));
            }
            g
        }
        None => build(mesh, sensor, cfg.grid_spec()?)?,
    };
    encoded(grid, enc)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let exp = section(&cfg.experiment, "experiment")?;
    let mesh = TriangleMesh::load(&cfg.mesh)?;
    let sensor = cfg.sensor.model()?;
    let enc = encoder(cfg)?;
    let grid = experiment_grid(cfg, &mesh, &sensor, &enc)?;
    let report = match exp.kind {
        ExperimentKind::Single => {
            let methods = exp.methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?;
            let setup = SingleContactSetup {
                mesh: &mesh,
                grid: &grid,
                encoder: &enc,
                noise: cfg.noise,
                registration: cfg.registration,
                n_trials: exp.n_trials,
                methods,
                random_trials: exp.random_trials,
                seed: cfg.seed,
            };
            run_single_contact_experiment(&setup)?
        }
        ExperimentKind::Multi => {
            let n = grid.len();
            let mut grids = vec![Arc::new(grid)];
            let mut built: Vec<(&GridSpec, Arc<PoseGrid>)> = Vec::new();
            for spec in &exp.sensor_grids {
                let g = match built.iter().find(|(s, _)| *s == spec) {
                    Some((_, g)) => g.clone(),
                    None => {
                        let g = Arc::new(encoded(build(&mesh, &sensor, spec)?, &enc)?);
                        built.push((spec, g.clone()));
                        g
                    }
                };
                grids.push(g);
            }
            let setup = MultiContactSetup {
                mesh: &mesh,
                grids,
                encoder: &enc,
                noise: cfg.noise,
                priors: PriorSpec { task: Prior::parse(&exp.task_prior, n)?, train: Prior::parse(&exp.train_prior, n)? },
                fusion: FusionOptions { contact_factor: exp.contact_factor, exclusion_log_floor: None },
                n_examples: exp.n_examples,
                max_contacts: exp.max_contacts,
                random_trials: exp.random_trials,
                seed: cfg.seed,
            };
            run_multi_contact_experiment(&setup)?
        }
    };
    write_report(cfg, &report, exp.histogram_bins)
}
