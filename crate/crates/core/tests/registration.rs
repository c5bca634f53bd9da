use nalgebra::{Matrix3, Matrix4, SymmetricEigen, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use touchloc::evaluation::AddMetric;
use touchloc::fixtures;
use touchloc::grid::{build_grid, GridSpec, PoseGrid, Symmetry};
use touchloc::registration::{refine_pose, register, RegistrationParams};
use touchloc::{MeshRenderer, PointCloud, Pose, SensorModel, TriangleMesh};

fn blob(seed: u64, n: usize) -> PointCloud {
    let mesh = fixtures::asymmetric_prism();
    let pts = mesh.sample_surface(n, seed).unwrap();
    // keep it patch-sized, like a contact cloud
    PointCloud::new(pts.points().iter().map(|p| p * 0.5 + Vector3::new(0.0, 0.0, 25.0)).collect())
}

fn params(iters: usize) -> RegistrationParams {
    RegistrationParams { max_iterations: iters, convergence_tol: 1e-14, ..Default::default() }
}

fn rot_err(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = a.transpose() * b;
    (((c.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

#[test]
fn identical_clouds_give_identity() {
    let c = blob(1, 300);
    let r = register(&c, &c, &params(5)).unwrap();
    assert!(!r.degenerate);
    assert!((r.transform.rotation() - Matrix3::identity()).abs().max() < 1e-9);
    assert!(r.transform.translation().norm() < 1e-9);
}

#[test]
fn injected_translation_is_recovered() {
    // sparse relative to sigma, so EM converges quickly
    let src = fixtures::asymmetric_prism().sample_surface(120, 2).unwrap();
    let d = Vector3::new(0.5, -0.3, 0.2);
    let tgt = Pose::from_translation(d).apply(&src);
    let r = register(&src, &tgt, &RegistrationParams { max_iterations: 20, sigma: 1.0, convergence_tol: 0.0, ..Default::default() }).unwrap();
    assert!(!r.degenerate);
    let terr = (r.transform.translation() - d).norm();
    let rerr = rot_err(r.transform.rotation(), &Matrix3::identity());
    assert!(terr < 1e-6, "translation error {terr}");
    assert!(rerr < 1e-8, "rotation error {rerr}");
}

/// Horn's closed-form absolute orientation: the rotation is the top
/// eigenvector of a 4x4 matrix built from the weighted cross-covariance.
fn horn(src: &[Vector3<f64>], tgt: &[Vector3<f64>], w: &[Vec<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut total = 0.0;
    let (mut ms, mut mt) = (Vector3::zeros(), Vector3::zeros());
    for (n, t) in tgt.iter().enumerate() {
        for (m, s) in src.iter().enumerate() {
            total += w[n][m];
            ms += w[n][m] * s;
            mt += w[n][m] * t;
        }
    }
    ms /= total;
    mt /= total;
    let mut s = [[0.0; 3]; 3];
    for (n, t) in tgt.iter().enumerate() {
        for (m, p) in src.iter().enumerate() {
            let (a, b) = (p - ms, t - mt);
            for i in 0..3 {
                for j in 0..3 {
                    s[i][j] += w[n][m] * a[i] * b[j];
                }
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    #[rustfmt::skip]
    let nm = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nm);
    let k = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(k);
    let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
    (r, mt - r * ms)
}

#[test]
fn wide_kernel_single_step_matches_weighted_svd_oracle() {
    let src = blob(3, 120);
    let truth = Pose::from_axis_angle(Vector3::new(0.2, 1.0, -0.4), 0.15, Vector3::new(0.4, 0.1, -0.3));
    let tgt = truth.apply(&blob(4, 110));
    for sigma in [3.0, 300.0] {
        let p = RegistrationParams { sigma, outlier_weight: 0.0, max_iterations: 1, ..Default::default() };
        let r = register(&src, &tgt, &p).unwrap();
        // responsibilities written out directly: target-side and source-side
        // normalized Gaussian kernels, summed
        let (s, t) = (src.points(), tgt.points());
        let k: Vec<Vec<f64>> = t.iter().map(|tn| s.iter().map(|sm| (-(tn - sm).norm_squared() / (2.0 * sigma * sigma)).exp()).collect()).collect();
        let row: Vec<f64> = k.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<f64> = (0..s.len()).map(|m| k.iter().map(|r| r[m]).sum()).collect();
        let w: Vec<Vec<f64>> = (0..t.len()).map(|n| (0..s.len()).map(|m| k[n][m] / row[n] + k[n][m] / col[m]).collect()).collect();
        let (ro, to) = horn(s, t, &w);
        assert!(!r.degenerate);
        assert!(rot_err(r.transform.rotation(), &ro) < 1e-7, "sigma {sigma}");
        assert!((r.transform.translation() - to).norm() < 1e-6, "sigma {sigma}");
        if sigma > 10.0 {
            // near-uniform weights: moved source centroid lands on the target centroid
            let cs = src.centroid().unwrap();
            let ct = tgt.centroid().unwrap();
            assert!((r.transform.transform_point(&cs) - ct).norm() < 0.02);
        }
    }
}

#[test]
fn exactly_uniform_weights_are_degenerate() {
    // with an unbounded kernel every pair gets the same weight and the
    // centred cross-covariance vanishes
    let src = blob(5, 60);
    let tgt = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)).apply(&src);
    let r = register(&src, &tgt, &RegistrationParams { sigma: 1e12, outlier_weight: 0.0, ..Default::default() }).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.transform, Pose::identity());
}

#[test]
fn objective_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let src = blob(10 + trial, 200);
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0));
        let tgt = Pose::from_axis_angle(axis, rng.random_range(0.0..0.2), t).apply(&blob(100 + trial, 180));
        let p = RegistrationParams { sigma: rng.random_range(0.5..2.0), outlier_weight: rng.random_range(0.0..0.5), ..params(15) };
        let r = register(&src, &tgt, &p).unwrap();
        for w in r.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "trial {trial}: {:?}", r.objective);
        }
    }
}

#[test]
fn equivariant_under_common_transform() {
    let src = blob(6, 250);
    let tgt = Pose::from_axis_angle(Vector3::new(1.0, 0.0, 1.0), 0.1, Vector3::new(0.3, 0.6, 0.0)).apply(&blob(7, 250));
    let g = Pose::from_axis_angle(Vector3::new(-0.3, 0.8, 0.1), 1.1, Vector3::new(5.0, -2.0, 3.0));
    let p = params(8);
    let a = register(&src, &tgt, &p).unwrap().transform;
    let b = register(&g.apply(&src), &g.apply(&tgt), &p).unwrap().transform;
    let conj = g.compose(&a).compose(&g.inverse());
    assert!((b.rotation() - conj.rotation()).abs().max() < 1e-6);
    assert!((b.translation() - conj.translation()).norm() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn output_is_a_proper_rotation(
        seed in 0u64..1000,
        angle in 0.0f64..0.5,
        tx in -2.0f64..2.0,
        sigma in 0.3f64..3.0,
    ) {
        let src = blob(seed, 80);
        let tgt = Pose::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), angle, Vector3::new(tx, 0.0, 0.0)).apply(&blob(seed + 1, 90));
        let r = register(&src, &tgt, &RegistrationParams { sigma, ..params(3) }).unwrap();
        let m = r.transform.rotation();
        prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
        prop_assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
    }
}

fn prism_grid() -> (TriangleMesh, PoseGrid) {
    let mesh = fixtures::asymmetric_prism();
    let spec = GridSpec {
        x_range: [-2.0, 2.0],
        y_range: [-2.0, 2.0],
        x_step: 2.0,
        y_step: 2.0,
        n_view_dirs: 2,
        n_rolls: 6,
        view_center: [0.0, 0.0, -1.0],
        view_cone_deg: 20.0,
        symmetry: Symmetry::None,
        seed: 1,
    };
    let grid = build_grid(&mesh, &SensorModel::work(), &spec).unwrap();
    (mesh, grid)
}

#[test]
fn refining_an_exact_grid_render_changes_nothing() {
    let (mesh, grid) = prism_grid();
    let renderer = MeshRenderer::new(&mesh);
    let metric = AddMetric::new(&mesh, 2000, 3).unwrap();
    let sensor = *grid.sensor();
    for k in [0, grid.len() / 3, grid.len() - 1] {
        let query = renderer.render_contact_shape(grid.pose(k), &sensor, None).unwrap().quantized();
        let (refined, r) = refine_pose(&grid, k, &query, &sensor, &params(5)).unwrap();
        assert!(!r.degenerate);
        let e = metric.error(&refined, grid.pose(k));
        assert!(e < 1e-6, "pose {k}: {e}");
    }
}

#[test]
fn in_plane_perturbations_are_reduced() {
    let (mesh, grid) = prism_grid();
    let renderer = MeshRenderer::new(&mesh);
    let metric = AddMetric::new(&mesh, 2000, 3).unwrap();
    let sensor = *grid.sensor();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut better, mut total) = (0, 0);
    while total < 50 {
        let k = rng.random_range(0..grid.len());
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let p = grid.pose(k);
        let truth = Pose::new(*p.rotation(), p.translation() + Vector3::new(a.cos(), a.sin(), 0.0));
        let query = renderer.render_contact_shape(&truth, &sensor, None).unwrap();
        if !query.has_contact() {
            continue;
        }
        total += 1;
        let (refined, _) = refine_pose(&grid, k, &query, &sensor, &RegistrationParams::default()).unwrap();
        if metric.error(&refined, &truth) < metric.error(p, &truth) {
            better += 1;
        }
    }
    assert!(better >= 45, "{better} of {total} improved");
}
