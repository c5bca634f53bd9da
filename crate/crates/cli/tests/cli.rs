use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use touchloc::grid::load_grid;
use touchloc::render::read_contact_shape;
use touchloc::SensorModel;

fn mesh(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../meshes").join(name)
}

fn touchloc(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_touchloc"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(config: &Path, cmd: &str) {
    let out = touchloc(config, &[cmd]);
    assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn small_grid() -> Value {
    json!({
        "x_range": [-2, 2], "y_range": [-2, 2], "x_step": 2, "y_step": 2,
        "n_view_dirs": 1, "n_rolls": 12, "view_cone_deg": 3, "seed": 1
    })
}

/// Prism run at a coarse resolution, small enough to replay every command.
fn prism_config() -> Value {
    json!({
        "mesh": mesh("asymmetric_prism.obj"),
        "sensor": { "resolution": [100, 100] },
        "grid": small_grid(),
        "output_dir": "out",
        "seed": 3
    })
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            files.insert(path.clone(), std::fs::read(&path).unwrap());
        }
    }
    files
}

/// Runs `cmd` twice and checks the output directory is byte-identical.
fn replay(config: &Path, out: &Path, cmd: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    run_ok(config, cmd);
    let first = snapshot(out);
    run_ok(config, cmd);
    let second = snapshot(out);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (path, bytes) in &first {
        assert!(*bytes == second[path], "{cmd}: {} differs between runs", path.display());
    }
    first
}

fn read_pfm(path: &Path) -> (usize, usize, Vec<f32>) {
    let bytes = std::fs::read(path).unwrap();
    let mut lines = 0;
    let mut at = 0;
    while lines < 3 {
        if bytes[at] == b'\n' {
            lines += 1;
        }
        at += 1;
    }
    let header = std::str::from_utf8(&bytes[..at]).unwrap();
    let mut it = header.split_whitespace();
    assert_eq!(it.next(), Some("Pf"));
    let w: usize = it.next().unwrap().parse().unwrap();
    let h: usize = it.next().unwrap().parse().unwrap();
    assert_eq!(it.next(), Some("-1.0"));
    let raw: Vec<f32> = bytes[at..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(raw.len(), w * h);
    // flip back to top-to-bottom rows
    let mut depth = Vec::with_capacity(w * h);
    for v in (0..h).rev() {
        depth.extend_from_slice(&raw[v * w..(v + 1) * w]);
    }
    (w, h, depth)
}

fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let col = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

#[test]
fn every_command_replays_byte_identically() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let mut cfg = prism_config();
    cfg["encoder"] = json!({ "kind": "linear", "train": { "epochs": 2, "samples_per_epoch": 32, "batch_size": 8 } });
    cfg["render"] = json!({ "pose": { "translation": [0.5, -0.5, 40], "quaternion": [1, 0, 0, 0] } });
    let config = write_config(dir.path(), "run.json", &cfg);

    let rendered = replay(&config, &out, "render");
    for name in ["depth.pfm", "contact.pgm", "contact.json", "pose.json", "resolved_config.json"] {
        assert!(rendered.contains_key(&out.join(name)), "missing {name}");
    }
    replay(&config, &out, "build-grid");
    let trained = replay(&config, &out, "train-encoder");
    assert!(trained.contains_key(&out.join("encoder.bin")) && trained.contains_key(&out.join("loss_curve.csv")));

    cfg["localize"] = json!({ "query": "out/contact.pgm", "top_k": 3, "refine": true });
    cfg["fuse"] = json!({ "sensors": [{ "query": "out/contact.pgm" }, { "query": "out/contact.pgm", "grid": "out/grid.tlg" }] });
    cfg["experiment"] = json!({ "kind": "single", "n_trials": 4, "methods": ["Best-1", "Reg-1", "random"], "random_trials": 20 });
    let config = write_config(dir.path(), "run.json", &cfg);
    let located = replay(&config, &out, "localize");
    let top = String::from_utf8(located[&out.join("top_k.csv")].clone()).unwrap();
    assert_eq!(top.lines().count(), 4);
    assert!(top.lines().next().unwrap().contains("ref_qz"));
    replay(&config, &out, "fuse");
    let evaluated = replay(&config, &out, "evaluate");
    for name in ["report.csv", "summary.json", "histograms.dat"] {
        assert!(evaluated.contains_key(&out.join(name)), "missing {name}");
    }

    // a different seed changes the stochastic outputs
    let report = evaluated[&out.join("report.csv")].clone();
    let again = touchloc(&config, &["--seed", "4", "evaluate"]);
    assert!(again.status.success());
    assert_ne!(std::fs::read(out.join("report.csv")).unwrap(), report);
}

#[test]
fn multi_contact_evaluation_replays() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let mut cfg = prism_config();
    let mut side = small_grid();
    side["view_center"] = json!([1, 0, 0]);
    side["view_cone_deg"] = json!(2);
    cfg["experiment"] = json!({
        "kind": "multi", "n_examples": 3, "max_contacts": 2, "random_trials": 20, "sensor_grids": [side]
    });
    let config = write_config(dir.path(), "multi.json", &cfg);
    let files = replay(&config, &out, "evaluate");
    let report = String::from_utf8(files[&out.join("report.csv")].clone()).unwrap();
    assert!(report.lines().count() > 1);
}

#[test]
fn plane_contact_is_flat() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "mesh": mesh("plane.obj"),
        "render": { "pose": { "translation": [0, 0, 30], "quaternion": [1, 0, 0, 0] } },
        "output_dir": "out"
    });
    run_ok(&write_config(dir.path(), "plane.json", &cfg), "render");
    let (cs, meta) = read_contact_shape(&dir.path().join("out/contact.pgm")).unwrap();
    let sensor = SensorModel::work();
    assert_eq!((cs.width, cs.height), (sensor.width, sensor.height));
    assert_eq!(meta.delta_d_mm, sensor.delta_d);
    let mut inside = 0;
    for v in 0..cs.height {
        for u in 0..cs.width {
            if sensor.pixel_in_window(u, v) {
                assert_eq!(cs.at(u, v), 0.0, "pixel ({u},{v})");
                inside += 1;
            }
        }
    }
    assert!(inside > 1000);
    let pose: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/pose.json")).unwrap()).unwrap();
    assert!((pose["translation"][2].as_f64().unwrap() - sensor.d).abs() < 1e-6);
}

#[test]
fn sphere_depth_matches_ray_oracle() {
    let dir = TempDir::new().unwrap();
    let z0 = 35.0;
    let cfg = json!({
        "mesh": mesh("sphere_r10.obj"),
        "render": { "pose": { "translation": [0, 0, z0], "quaternion": [1, 0, 0, 0] }, "project_to_contact": false, "delta_d": 30.0 },
        "output_dir": "out"
    });
    run_ok(&write_config(dir.path(), "sphere.json", &cfg), "render");
    let (w, h, depth) = read_pfm(&dir.path().join("out/depth.pfm"));
    let sensor = SensorModel::work();
    assert_eq!((w, h), (sensor.width, sensor.height));
    let mut hits = 0;
    for v in 0..h {
        for u in 0..w {
            let r = sensor.ray(u, v);
            let rc = r.z * z0;
            let disc = rc * rc - r.norm_squared() * (z0 * z0 - 100.0);
            let got = depth[v * w + u] as f64;
            if disc <= 0.0 || !got.is_finite() {
                continue;
            }
            // tessellation sag is radial, so check the radius everywhere
            let p = r * got;
            let radius = (p.x * p.x + p.y * p.y + (p.z - z0) * (p.z - z0)).sqrt();
            assert!((radius - 10.0).abs() < 0.02, "pixel ({u},{v}): radius {radius}");
            // and depth where the ray is not grazing
            if disc.sqrt() > 0.5 * r.norm() * 10.0 {
                let want = (rc - disc.sqrt()) / r.norm_squared();
                assert!((got - want).abs() < 0.04, "pixel ({u},{v}): {got} vs {want}");
                hits += 1;
            }
        }
    }
    assert!(hits > 500);
}

#[test]
fn localize_recovers_a_grid_pose() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let mut cfg = prism_config();
    let config = write_config(dir.path(), "run.json", &cfg);
    run_ok(&config, "build-grid");
    let grid = load_grid(&out.join("grid.tlg")).unwrap();
    let target = 7;
    let p = grid.pose(target);
    let t = p.translation();
    cfg["render"] = json!({ "pose": { "translation": [t.x, t.y, t.z], "quaternion": p.quaternion() }, "project_to_contact": false });
    cfg["localize"] = json!({ "query": "out/contact.pgm", "top_k": 5 });
    cfg["fuse"] = json!({ "sensors": [{ "query": "out/contact.pgm" }] });
    let config = write_config(dir.path(), "run.json", &cfg);
    run_ok(&config, "render");
    run_ok(&config, "localize");
    let top = std::fs::read_to_string(out.join("top_k.csv")).unwrap();
    assert_eq!(csv_column(&top, "index")[0], target as f64);

    // one contact with uniform priors is the single-contact posterior
    run_ok(&config, "fuse");
    let single = csv_column(&std::fs::read_to_string(out.join("posterior.csv")).unwrap(), "log_prob");
    let fused = csv_column(&std::fs::read_to_string(out.join("fused_posterior.csv")).unwrap(), "log_prob");
    assert_eq!(single.len(), grid.len());
    for (a, b) in single.iter().zip(&fused) {
        assert!((a.exp() - b.exp()).abs() < 1e-9);
    }
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = TempDir::new().unwrap();
    let code = |path: &Path, cmd: &str| touchloc(path, &[cmd]).status.code().unwrap();

    let unknown = write_config(dir.path(), "unknown.json", &json!({ "mesh": "m.obj", "output_dir": "out", "colour": 1 }));
    assert_eq!(code(&unknown, "render"), 2);
    let no_section = write_config(dir.path(), "bare.json", &json!({ "mesh": mesh("plane.obj"), "output_dir": "out" }));
    assert_eq!(code(&no_section, "render"), 2);
    let missing = Command::new(env!("CARGO_BIN_EXE_touchloc")).arg("render").output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let no_mesh = write_config(
        dir.path(),
        "nomesh.json",
        &json!({ "mesh": "absent.obj", "output_dir": "out", "render": { "pose": { "translation": [0, 0, 30], "quaternion": [1, 0, 0, 0] } } }),
    );
    assert_eq!(code(&no_mesh, "render"), 4);

    // far from the gel with projection off: nothing touches
    let apart = write_config(
        dir.path(),
        "apart.json",
        &json!({
            "mesh": mesh("plane.obj"), "output_dir": "out",
            "render": { "pose": { "translation": [0, 0, 80], "quaternion": [1, 0, 0, 0] }, "project_to_contact": false }
        }),
    );
    assert_eq!(code(&apart, "render"), 3);

    let bad_quat = write_config(
        dir.path(),
        "quat.json",
        &json!({ "mesh": mesh("plane.obj"), "output_dir": "out", "render": { "pose": { "translation": [0, 0, 30], "quaternion": [0, 0, 0, 0] } } }),
    );
    assert_ne!(code(&bad_quat, "render"), 0);
}
