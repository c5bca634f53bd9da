use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use touchloc::fixtures;
use touchloc::grid::{build_grid, GridSpec, PoseGrid, Symmetry};
use touchloc::posterior::{
    fuse_log_posteriors, fuse_multi_contact, kinematic_posterior, kinematic_support, single_contact_posterior,
    FusionOptions, PosePosterior, Prior, PriorSpec, SensorEvidence, SensorMount, SensorRig, TransferMap,
};
use touchloc::similarity::{encode_grid, Encoder};
use touchloc::{ContactShape, Error, MeshRenderer, Pose, SensorModel};

fn ln(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln()).collect()
}

fn normalized_logs(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| (v / s).ln()).collect()
}

fn spec(center: [f64; 3], n_rolls: usize) -> GridSpec {
    GridSpec {
        x_range: [-2.0, 2.0],
        y_range: [-2.0, 2.0],
        x_step: 2.0,
        y_step: 2.0,
        n_view_dirs: 1,
        n_rolls,
        view_center: center,
        view_cone_deg: 2.0,
        symmetry: Symmetry::None,
        seed: 1,
    }
}

fn encoded(mut g: PoseGrid, enc: &Encoder) -> Arc<PoseGrid> {
    g.set_descriptors(encode_grid(enc, &g)).unwrap();
    Arc::new(g)
}

#[test]
fn two_sensor_example() {
    let t = TransferMap::identity(3);
    let (a, b) = (ln(&[0.5, 0.3, 0.2]), ln(&[0.2, 0.3, 0.5]));
    let ev = [SensorEvidence { transfer: &t, log_prob: Some(&a) }, SensorEvidence { transfer: &t, log_prob: Some(&b) }];
    let p = fuse_log_posteriors("toy".into(), &ev, None, None, &FusionOptions::default()).unwrap().probabilities();
    for (got, want) in p.iter().zip([0.10 / 0.29, 0.09 / 0.29, 0.10 / 0.29]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((p[0] - 0.3448).abs() < 1e-4 && (p[1] - 0.3103).abs() < 1e-4);
}

/// Product of the per-sensor probabilities, task prior over train prior to the
/// N-th power, normalized; computed in linear space.
fn brute_force(n: usize, sensors: &[(Vec<Option<usize>>, Option<Vec<f64>>)], task: &[f64], train: &[f64]) -> Vec<f64> {
    let n_contact = sensors.iter().filter(|s| s.1.is_some()).count() as i32;
    let mut w = vec![0.0; n];
    for (x, wx) in w.iter_mut().enumerate() {
        let mut v = task[x] / train[x].powi(n_contact);
        for (targets, post) in sensors {
            match (post, targets[x]) {
                (Some(p), Some(j)) => v *= p[j],
                (None, None) => {}
                _ => v = 0.0,
            }
        }
        *wx = v;
    }
    let z: f64 = w.iter().sum();
    w.iter().map(|v| (v / z).ln()).collect()
}

#[test]
fn fusion_matches_brute_force_on_toy_grids() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..50 {
        let n = 20;
        let n_sensors = 1 + trial % 3;
        let task: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
        let train: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
        let mut sensors = Vec::new();
        for i in 0..n_sensors {
            let m = r.random_range(5..25);
            let targets: Vec<Option<usize>> =
                (0..n).map(|x| if i == 0 { Some(x) } else if r.random_bool(0.8) { Some(r.random_range(0..m)) } else { None }).collect();
            let post = (i == 0 || r.random_bool(0.8)).then(|| {
                let w: Vec<f64> = (0..if i == 0 { n } else { m }).map(|_| r.random_range(0.01..1.0)).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect::<Vec<f64>>()
            });
            sensors.push((targets, post));
        }
        let want = brute_force(n, &sensors, &task, &train);
        let maps: Vec<TransferMap> = sensors.iter().map(|s| TransferMap { targets: s.0.clone() }).collect();
        let logs: Vec<Option<Vec<f64>>> = sensors.iter().map(|s| s.1.as_ref().map(|p| ln(p))).collect();
        let ev: Vec<SensorEvidence> =
            maps.iter().zip(&logs).map(|(t, l)| SensorEvidence { transfer: t, log_prob: l.as_deref() }).collect();
        let lt = Prior::Weights(task.clone()).log_weights(n).unwrap().unwrap();
        let lr = Prior::Weights(train.clone()).log_weights(n).unwrap().unwrap();
        let got = match fuse_log_posteriors("toy".into(), &ev, Some(&lt), Some(&lr), &FusionOptions::default()) {
            Ok(p) => p,
            Err(Error::EmptySupport) => {
                assert!(want.iter().all(|v| v.is_nan() || *v == f64::NEG_INFINITY));
                continue;
            }
            Err(e) => panic!("{e}"),
        };
        for (g, w) in got.log_prob.iter().zip(&want) {
            if *w == f64::NEG_INFINITY {
                assert_eq!(*g, f64::NEG_INFINITY);
            } else {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
        // sensor order does not matter
        let rev: Vec<SensorEvidence> = ev.iter().rev().copied().collect();
        let back = fuse_log_posteriors("toy".into(), &rev, Some(&lt), Some(&lr), &FusionOptions::default()).unwrap();
        for (a, b) in got.log_prob.iter().zip(&back.log_prob) {
            assert!(a == b || (a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn exclusion_floor_replaces_minus_infinity() {
    let t = TransferMap { targets: vec![Some(0), None, Some(1)] };
    let id = TransferMap::identity(3);
    let (a, b) = (ln(&[0.2, 0.5, 0.3]), ln(&[0.5, 0.5]));
    let ev = [SensorEvidence { transfer: &id, log_prob: Some(&a) }, SensorEvidence { transfer: &t, log_prob: Some(&b) }];
    let hard = fuse_log_posteriors("g".into(), &ev, None, None, &FusionOptions::default()).unwrap();
    assert_eq!(hard.log_prob[1], f64::NEG_INFINITY);
    let soft = FusionOptions { exclusion_log_floor: Some(-30.0), ..Default::default() };
    assert!(fuse_log_posteriors("g".into(), &ev, None, None, &soft).unwrap().log_prob[1].is_finite());
    let none = TransferMap { targets: vec![None; 3] };
    let ev = [SensorEvidence { transfer: &id, log_prob: Some(&a) }, SensorEvidence { transfer: &none, log_prob: Some(&b) }];
    assert!(matches!(fuse_log_posteriors("g".into(), &ev, None, None, &FusionOptions::default()), Err(Error::EmptySupport)));
}

#[test]
fn best_k_examples() {
    let mut lp = vec![f64::NEG_INFINITY; 6];
    lp[4] = 0.0;
    let delta = PosePosterior::from_log_weights("g".into(), lp).unwrap();
    assert_eq!(delta.best_k(1), vec![(4, 1.0)]);

    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut logs = normalized_logs(&mut r, 40);
    logs[7] = logs[3];
    let p = PosePosterior::from_log_weights("g".into(), logs).unwrap();
    let all = p.best_k(40);
    assert_eq!(all.len(), 40);
    assert!((all.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-9);
    let mut oracle: Vec<(usize, f64)> = p.probabilities().into_iter().enumerate().collect();
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    assert_eq!(p.best_k(10), oracle[..10].to_vec());
    assert_eq!(p.best_k(1000).len(), 40);
}

#[test]
fn posterior_csv_round_trip() {
    let mesh = fixtures::asymmetric_prism();
    let grid = build_grid(&mesh, &SensorModel::work(), &spec([0.0, 0.0, -1.0], 6)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut logs = normalized_logs(&mut r, grid.len());
    logs[2] = f64::NEG_INFINITY;
    let p = PosePosterior::from_log_weights(grid.fingerprint(), logs).unwrap();
    let csv = p.to_csv(&grid);
    assert!(csv.starts_with("index,x,y,z,qw,qx,qy,qz,log_prob"));
    let back = PosePosterior::from_csv(&csv, grid.fingerprint()).unwrap();
    for (a, b) in back.log_prob.iter().zip(&p.log_prob) {
        assert!(a == b || (a - b).abs() < 1e-12);
    }
}

#[test]
fn prior_csv_parsing() {
    let p = Prior::from_csv("index,weight\n0,1\n2,3\n", 4).unwrap();
    assert_eq!(p, Prior::Weights(vec![1.0, 0.0, 3.0, 0.0]));
    assert!(Prior::from_csv("0,-1\n", 2).is_err());
    assert!(Prior::from_csv("5,1\n", 2).is_err());
    assert!(Prior::from_csv("0,0\n", 2).is_err());
    assert_eq!(Prior::parse("uniform", 3).unwrap(), Prior::Uniform);
}

#[test]
fn single_contact_posterior_properties() {
    let mesh = fixtures::asymmetric_prism();
    let sensor = SensorModel::work();
    let g = build_grid(&mesh, &sensor, &spec([0.0, 0.0, -1.0], 12)).unwrap();
    let enc = Encoder::baseline(0.07);
    let grid = encoded(g.clone(), &enc);
    for k in [0, 20, grid.len() - 1] {
        let post = single_contact_posterior(&grid.shape(k), &grid, &enc).unwrap();
        let best = post.best_k(1)[0].0;
        assert!(best == k || grid.shape(best).to_mask().mismatch_fraction(&grid.shape(k).to_mask()) <= 0.01);
        // naive softmax oracle
        let q = enc.encode(&grid.shape(k));
        let logits: Vec<f64> = (0..grid.len())
            .map(|i| grid.descriptors().unwrap().row(i).iter().zip(&q).map(|(&a, b)| a as f64 * b).sum::<f64>() / 0.07)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (p, l) in post.probabilities().iter().zip(&logits) {
            assert!((p - (l - m).exp() / z).abs() < 1e-9);
        }
    }
    let hot = Encoder::baseline(1e9);
    let flat = encoded(g, &hot);
    let post = single_contact_posterior(&flat.shape(5), &flat, &hot).unwrap();
    let u = 1.0 / flat.len() as f64;
    assert!(post.probabilities().iter().all(|p| (p - u).abs() < 1e-6));
}

struct Rig {
    rig: SensorRig,
    renderer: MeshRenderer,
    enc: Encoder,
    shapes: Vec<ContactShape>,
}

fn keyed_rig(with_side: bool) -> Rig {
    let mesh = fixtures::keyed_block();
    let sensor = SensorModel::work();
    let enc = Encoder::baseline(0.07);
    let renderer = MeshRenderer::new(&mesh);
    let g1 = encoded(build_grid(&mesh, &sensor, &spec([0.0, 0.0, -1.0], 12)).unwrap(), &enc);
    let truth = *g1.pose(40);
    let mut mounts = vec![SensorMount { sensor, extrinsic: Pose::identity() }];
    let mut grids = vec![g1.clone()];
    let mut shapes = vec![renderer.render_contact_shape(&truth, &sensor, None).unwrap()];
    if with_side {
        let g2 = encoded(build_grid(&mesh, &sensor, &spec([1.0, 0.0, 0.0], 12)).unwrap(), &enc);
        let local = *g2.pose(31);
        mounts.push(SensorMount { sensor, extrinsic: truth.compose(&local.inverse()) });
        shapes.push(renderer.render_contact_shape(&local, &sensor, None).unwrap());
        grids.push(g2);
    }
    Rig { rig: SensorRig::new(mounts, grids).unwrap(), renderer, enc, shapes }
}

#[test]
fn one_sensor_fusion_reduces_to_single_contact() {
    let r = keyed_rig(false);
    let fused = fuse_multi_contact(&r.rig, &r.shapes, &r.enc, &PriorSpec::default(), &FusionOptions::default()).unwrap();
    let single = single_contact_posterior(&r.shapes[0], &r.rig.grids[0], &r.enc).unwrap();
    assert_eq!(fused.grid_ref, single.grid_ref);
    for (a, b) in fused.log_prob.iter().zip(&single.log_prob) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn fusion_invariances() {
    let r = keyed_rig(true);
    let opts = FusionOptions::default();
    let transfers = TransferMap::for_rig(&r.rig, &opts);
    let posts: Vec<PosePosterior> =
        r.shapes.iter().zip(&r.rig.grids).map(|(s, g)| single_contact_posterior(s, g, &r.enc).unwrap()).collect();
    let fuse = |logs: &[Vec<f64>], maps: &[&TransferMap]| {
        let ev: Vec<SensorEvidence> =
            maps.iter().zip(logs).map(|(t, l)| SensorEvidence { transfer: *t, log_prob: Some(l.as_slice()) }).collect();
        fuse_log_posteriors("k".into(), &ev, None, None, &opts).unwrap()
    };
    let logs: Vec<Vec<f64>> = posts.iter().map(|p| p.log_prob.clone()).collect();
    let base = fuse(&logs, &[&transfers[0], &transfers[1]]);
    let direct = fuse_multi_contact(&r.rig, &r.shapes, &r.enc, &PriorSpec::default(), &opts).unwrap();
    assert_eq!(direct.log_prob, base.log_prob);

    let swapped = fuse(&[logs[1].clone(), logs[0].clone()], &[&transfers[1], &transfers[0]]);
    for (a, b) in base.log_prob.iter().zip(&swapped.log_prob) {
        assert!(a == b || (a - b).abs() < 1e-12);
    }
    // a positive constant factor on one posterior changes nothing
    let scaled: Vec<f64> = logs[1].iter().map(|v| v + 3.7f64.ln()).collect();
    let s = fuse(&[logs[0].clone(), scaled], &[&transfers[0], &transfers[1]]);
    for (a, b) in base.log_prob.iter().zip(&s.log_prob) {
        assert!(a == b || (a - b).abs() < 1e-12);
    }
    // a uniform sensor keeps the argmax set
    let uniform = vec![0.0; r.rig.grids[0].len()];
    let id = TransferMap::identity(r.rig.grids[0].len());
    let u = fuse(&[logs[0].clone(), logs[1].clone(), uniform], &[&transfers[0], &transfers[1], &id]);
    let top = |p: &PosePosterior| {
        let m = p.log_prob.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        p.log_prob.iter().enumerate().filter(|(_, v)| (*v - m).abs() < 1e-12).map(|(i, _)| i).collect::<Vec<_>>()
    };
    assert_eq!(top(&base), top(&u));
}

#[test]
fn kinematic_examples() {
    let one = keyed_rig(false);
    let opts = FusionOptions::default();
    let all = kinematic_posterior(&one.rig, &one.renderer, &[true], &opts).unwrap();
    assert_eq!(all.support().len(), one.rig.grids[0].len());
    assert!(matches!(kinematic_posterior(&one.rig, &one.renderer, &[false], &opts), Err(Error::EmptySupport)));
    assert!(matches!(kinematic_posterior(&one.rig, &one.renderer, &[true, true], &opts), Err(Error::InvalidInput(_))));
}

#[test]
fn kinematic_support_matches_per_pose_render_oracle() {
    let r = keyed_rig(true);
    let tolerance = 1.5 * r.rig.grids[0].mean_nn_distance();
    let support = kinematic_support(&r.rig, &r.renderer, &[true, true], tolerance);
    assert!(support.iter().any(|s| *s) && support.iter().any(|s| !s));
    // oracle: render a native-resolution depth image in sensor 2's frame
    let fine = SensorModel::native();
    let to_2 = r.rig.mounts[1].extrinsic.inverse();
    let mut disagreements = 0;
    for (i, x) in r.rig.grids[0].poses().iter().enumerate() {
        let depth = r.renderer.render_depth(&to_2.compose(x), &fine);
        let min = (0..fine.height)
            .flat_map(|v| (0..fine.width).map(move |u| (u, v)))
            .filter(|&(u, v)| fine.pixel_in_window(u, v))
            .map(|(u, v)| depth.at(u, v))
            .fold(f64::INFINITY, f64::min);
        let gap = min - fine.d;
        let touches = gap.abs() <= tolerance;
        if touches != support[i] {
            // only poses whose gap sits on the tolerance boundary may differ
            assert!((gap.abs() - tolerance).abs() < 0.05, "pose {i}: gap {gap}, support {}", support[i]);
            disagreements += 1;
        }
    }
    assert!(disagreements <= 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_posterior_is_normalized(seed in 0u64..1000, n in 2usize..30) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = normalized_logs(&mut r, n);
        let b = normalized_logs(&mut r, n);
        let t = TransferMap::identity(n);
        let ev = [SensorEvidence { transfer: &t, log_prob: Some(&a) }, SensorEvidence { transfer: &t, log_prob: Some(&b) }];
        let p = fuse_log_posteriors("p".into(), &ev, None, None, &FusionOptions::default()).unwrap();
        prop_assert!((p.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
