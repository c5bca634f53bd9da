use std::sync::OnceLock;

use nalgebra::Vector3;
use proptest::prelude::*;
use touchloc::fixtures;
use touchloc::grid::{build_grid, GridSpec, PoseGrid, Symmetry};
use touchloc::similarity::{
    argmax, encode_grid, loss_and_gradient, mask_input, sample_training_queries, score, softmax, train_contrastive, Encoder,
    TrainConfig, INPUT_DIM,
};
use touchloc::{ContactShape, Error, MeshRenderer, SensorModel, TriangleMesh};

fn small_grid(n_rolls: usize, xy: f64) -> (TriangleMesh, PoseGrid) {
    let mesh = fixtures::asymmetric_prism();
    let spec = GridSpec {
        x_range: [-xy, xy],
        y_range: [0.0, 0.0],
        x_step: 2.0,
        y_step: 1.0,
        n_view_dirs: 1,
        n_rolls,
        view_center: [0.0, 0.0, -1.0],
        view_cone_deg: 5.0,
        symmetry: Symmetry::None,
        seed: 0,
    };
    let grid = build_grid(&mesh, &SensorModel::work(), &spec).unwrap();
    (mesh, grid)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn descriptors_are_unit_and_deterministic() {
    let (_, grid) = small_grid(10, 0.0);
    let base = Encoder::baseline(0.07);
    let lin = Encoder::linear_random(32, 0.07, 0.5, 4);
    for enc in [&base, &lin] {
        for i in 0..grid.len() {
            let a = enc.encode(&grid.shape(i));
            assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-9);
            assert_eq!(a, enc.encode(&grid.shape(i)));
        }
    }
    let a = base.encode(&grid.shape(3));
    assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
}

#[test]
fn disjoint_pixels_are_orthogonal() {
    let enc = Encoder::baseline(0.07);
    let mut a = ContactShape::empty(200, 200, 2.0);
    let mut b = ContactShape::empty(200, 200, 2.0);
    a.values[10 * 200 + 10] = 0.5;
    b.values[150 * 200 + 120] = 0.5;
    assert_eq!(dot(&enc.encode(&a), &enc.encode(&b)), 0.0);
    // the empty mask has a fixed descriptor
    let e = enc.encode(&ContactShape::empty(200, 200, 2.0));
    assert_eq!(e[0], 1.0);
    assert_eq!(e.iter().filter(|v| **v != 0.0).count(), 1);
}

#[test]
fn score_examples_and_dot_product_oracle() {
    let (_, mut grid) = small_grid(60, 4.0);
    let enc = Encoder::baseline(0.07);
    assert!(matches!(score(&enc, &enc.encode(&grid.shape(0)), &grid), Err(Error::InvalidInput(_))));
    grid.set_descriptors(encode_grid(&enc, &grid)).unwrap();
    let desc = grid.descriptors().unwrap();
    for k in [0, 17, grid.len() - 1] {
        let q: Vec<f64> = desc.row(k).iter().map(|&v| v as f64).collect();
        let logits = score(&enc, &q, &grid).unwrap();
        assert!((logits[k] - dot(&q, &q) / 0.07).abs() < 1e-9);
        assert!((logits[k] - 1.0 / 0.07).abs() < 1e-5);
        assert_eq!(argmax(&logits), argmax(&logits.iter().map(|l| (l - logits[k]).min(0.0)).collect::<Vec<_>>()));
        for (i, l) in logits.iter().enumerate() {
            let naive = desc.row(i).iter().zip(&q).map(|(&g, &x)| g as f64 * x).sum::<f64>() / 0.07;
            assert!((l - naive).abs() < 1e-6);
            assert!(*l <= logits[k] + 1e-6);
        }
    }
    let mut orth = vec![0.0; INPUT_DIM];
    let used: Vec<bool> = (0..INPUT_DIM).map(|j| (0..grid.len()).any(|i| desc.row(i)[j] != 0.0)).collect();
    let free = used.iter().position(|u| !u).unwrap();
    orth[free] = 1.0;
    assert!(score(&enc, &orth, &grid).unwrap().iter().all(|l| *l == 0.0));

    let other = Encoder::baseline(0.1);
    assert!(matches!(score(&other, &orth, &grid), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let (mesh, grid) = small_grid(10, 0.0);
    assert_eq!(grid.len(), 10);
    let sensor = *grid.sensor();
    let renderer = MeshRenderer::new(&mesh);
    let cfg = TrainConfig { embed_dim: 8, seed: 3, ..Default::default() };
    let queries = sample_training_queries(&grid, &renderer, &sensor, &cfg, 0, 6).unwrap();
    let enc = Encoder::linear_random(cfg.embed_dim, 0.07, 1.0, 11);
    let grid_desc: Vec<f64> = (0..grid.len()).flat_map(|i| enc.encode(&grid.shape(i))).collect();
    let eval = |w: &[f64]| loss_and_gradient(w, cfg.embed_dim, 0.07, 1e-4, &grid_desc, &queries);
    let base = eval(&enc.weights);
    let h = 1e-5;
    let active: Vec<usize> = (0..INPUT_DIM).filter(|&j| queries.iter().any(|q| q.input[j] != 0.0)).collect();
    assert!(!active.is_empty());
    let mut coords: Vec<usize> = (0..cfg.embed_dim).flat_map(|r| active.iter().step_by(7).map(move |&j| r * INPUT_DIM + j)).collect();
    coords.extend([0, 5, INPUT_DIM + 3]);
    let (mut num, mut den) = (0.0, 0.0);
    for &c in &coords {
        let mut w = enc.weights.clone();
        w[c] += h;
        let up = eval(&w).objective;
        w[c] -= 2.0 * h;
        let down = eval(&w).objective;
        let fd = (up - down) / (2.0 * h);
        num += (fd - base.gradient[c]).powi(2);
        den += base.gradient[c].powi(2);
    }
    let rel = (num / den).sqrt();
    assert!(rel <= 1e-4, "relative gradient error {rel}");
}

#[test]
fn initial_loss_is_near_log_n() {
    let (mesh, grid) = small_grid(50, 0.0);
    assert_eq!(grid.len(), 50);
    let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, samples_per_epoch: 128, seed: 2, ..Default::default() };
    let enc = train_contrastive(&grid, &mesh, grid.sensor(), &cfg).unwrap();
    let loss = enc.loss_curve[0].mean_loss;
    let ln_n = (grid.len() as f64).ln();
    assert!((loss - ln_n).abs() / ln_n < 0.2, "initial loss {loss} vs ln n {ln_n}");
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let (mesh, grid) = small_grid(10, 0.0);
    let cfg = TrainConfig { epochs: 0, embed_dim: 16, seed: 9, ..Default::default() };
    let enc = train_contrastive(&grid, &mesh, grid.sensor(), &cfg).unwrap();
    let init = Encoder::linear_random(16, cfg.temperature, cfg.init_spread, 9);
    assert_eq!(enc.weights, init.weights);
    assert!(enc.loss_curve.is_empty());
}

#[test]
fn encoder_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let enc = Encoder::linear_random(24, 0.05, 0.3, 1);
    enc.save(&path).unwrap();
    let back = Encoder::load(&path).unwrap();
    assert_eq!(back, enc);
    assert_eq!(back.fingerprint(), enc.fingerprint());
}

#[test]
fn training_rejects_bad_threshold_range() {
    let (mesh, grid) = small_grid(10, 0.0);
    let cfg = TrainConfig { delta_d_min: 2.0, delta_d_max: 1.0, ..Default::default() };
    assert!(matches!(train_contrastive(&grid, &mesh, grid.sensor(), &cfg), Err(Error::InvalidConfig(_))));
    let other = fixtures::box_mesh(Vector3::new(5.0, 5.0, 5.0));
    let ok = TrainConfig { epochs: 0, ..Default::default() };
    assert!(matches!(train_contrastive(&grid, &other, grid.sensor(), &ok), Err(Error::FingerprintMismatch { .. })));
}

#[test]
fn mask_input_is_area_mean() {
    let mut cs = ContactShape::empty(64, 64, 2.0);
    for v in 0..2 {
        for u in 0..2 {
            cs.values[v * 64 + u] = 0.0;
        }
    }
    cs.values[2] = 0.0;
    let x = mask_input(&cs);
    assert_eq!(x.len(), INPUT_DIM);
    assert_eq!(x[0], 1.0);
    assert_eq!(x[1], 0.25);
    assert_eq!(x.iter().filter(|v| **v != 0.0).count(), 2);
}

fn encoded_grid() -> &'static PoseGrid {
    static GRID: OnceLock<PoseGrid> = OnceLock::new();
    GRID.get_or_init(|| {
        let (_, mut grid) = small_grid(8, 4.0);
        grid.set_descriptors(encode_grid(&Encoder::baseline(0.07), &grid)).unwrap();
        grid
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..200)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn argmax_ignores_query_scale(k in 0usize..40, scale in 0.01f64..100.0) {
        let grid = encoded_grid();
        let enc = Encoder::baseline(0.07);
        let q = enc.encode(&grid.shape(k % grid.len()));
        let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
        prop_assert_eq!(argmax(&score(&enc, &q, grid).unwrap()), argmax(&score(&enc, &scaled, grid).unwrap()));
    }
}
