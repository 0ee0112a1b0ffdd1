use pairedinv::datagen::{build_dataset, Family, ModelStyle, Noise, Split};
use pairedinv::diagnostics::*;
use pairedinv::paired::{ArchConfig, Normalizer, PairedModel};
use pairedinv::wave::{ricker, stable_dt, Acquisition, Grid2D, WaveSolver};
use pairedinv::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (Grid2D, Acquisition) {
    let grid = Grid2D::new(16, 16, 10.0, 10.0).unwrap();
    let dt = stable_dt(&grid, 4000.0, 0.8);
    let w = ricker(20.0, 128, dt, 0.06).unwrap();
    (grid, Acquisition::line(&grid, 2, 8, 1, 128, dt, w).unwrap())
}

fn tiny_model() -> PairedModel<f32> {
    let arch = ArchConfig {
        model_channels: 1,
        model_hw: [16, 16],
        data_channels: 2,
        data_hw: [8, 32],
        enc_widths: vec![2, 2],
        dec_widths: vec![2, 2],
        blocks: 1,
        bottleneck: 2,
        latent_dim: 4,
        h: 0.5,
        learned_maps: false,
    };
    let norm = Normalizer {
        q_offset: 0.5 * (1500.0f64.powi(2) + 4000.0f64.powi(2)),
        q_scale: 2e6,
        b_scale: 1e-3,
        time_factor: 4,
    };
    PairedModel::new(arch, norm, 5).unwrap()
}

fn pts(v: &[(f64, f64)]) -> Vec<MetricPoint> {
    v.iter().map(|&(rre, rma)| MetricPoint { rre, rma }).collect()
}

fn random_points(n: usize, seed: u64) -> Vec<MetricPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| MetricPoint {
            rre: rng.gen_range(0.0..1.0),
            rma: rng.gen_range(0.0..1.0),
        })
        .collect()
}

#[test]
fn identical_points_fill_one_cell() {
    let p = pts(&[(0.2, 0.05); 40]);
    let map = fit_density(&p, 8, 0.0).unwrap();
    let nonzero: Vec<f64> = map.cells.iter().copied().filter(|&c| c > 0.0).collect();
    assert_eq!(nonzero, vec![1.0]);
}

#[test]
fn smoothing_conserves_mass() {
    let p = random_points(500, 1);
    for sigma in [0.0, 0.5, 1.0, 3.0, 10.0, 40.0] {
        let map = fit_density(&p, 16, sigma).unwrap();
        let total: f64 = map.cells.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12, "sigma {sigma}: {total}");
        assert!(map.cells.iter().all(|&c| c >= 0.0));
    }
}

#[test]
fn uniform_points_give_flat_histogram() {
    let map = fit_density(&random_points(10_000, 2), DEFAULT_BINS, DEFAULT_SMOOTH_SIGMA).unwrap();
    let max = map.cells.iter().copied().fold(0.0, f64::max);
    let min = map.cells.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(max / min <= 3.0, "{max} / {min}");
}

#[test]
fn too_few_points_rejected() {
    assert!(matches!(fit_density(&random_points(29, 3), 8, 1.0), Err(Error::Invalid(_))));
}

#[test]
fn ood_score_extremes() {
    let mut v: Vec<(f64, f64)> = (0..200).map(|i| (0.1 + 0.001 * (i % 7) as f64, 0.05)).collect();
    v.extend((0..20).map(|i| (0.5 + 0.02 * i as f64, 0.3)));
    let p = pts(&v);
    let map = fit_density(&p, 16, 1.0).unwrap();
    let densest = *p.iter().max_by(|a, b| map.density(**a).total_cmp(&map.density(**b))).unwrap();
    let s = ood_score(&map, densest, DEFAULT_OOD_THRESHOLD);
    assert!(s.percentile < 0.95 && !s.is_ood, "{s:?}");
    let far = ood_score(&map, MetricPoint { rre: 1e3, rma: 0.05 }, DEFAULT_OOD_THRESHOLD);
    assert_eq!(far.density_value, 0.0);
    assert!(far.is_ood);
}

#[test]
fn density_map_round_trip() {
    let map = fit_density(&random_points(100, 4), 12, 1.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pairinv");
    map.save(&path).unwrap();
    assert_eq!(DensityMap::load(&path).unwrap(), map);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn percentile_is_monotone_in_density(seed in 0u64..1000, a in 0.0f64..1.2, b in 0.0f64..1.2, c in 0.0f64..1.2, d in 0.0f64..1.2) {
        let map = fit_density(&random_points(60, seed), 8, 0.7).unwrap();
        let s1 = ood_score(&map, MetricPoint { rre: a, rma: b }, 0.95);
        let s2 = ood_score(&map, MetricPoint { rre: c, rma: d }, 0.95);
        if s1.density_value <= s2.density_value {
            prop_assert!(s1.percentile >= s2.percentile);
        } else {
            prop_assert!(s1.percentile <= s2.percentile);
        }
    }

    #[test]
    fn auroc_matches_pair_counting(pos in proptest::collection::vec(0u8..6, 1..30), neg in proptest::collection::vec(0u8..6, 1..30)) {
        let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
        let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
        let mut wins = 0.0;
        for a in &p {
            for b in &n {
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (p.len() * n.len()) as f64;
        prop_assert!((auroc(&p, &n).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn auroc_extremes() {
    assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
    assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
    assert_eq!(auroc(&[1.0; 5], &[1.0; 3]).unwrap(), 0.5);
    assert!(auroc(&[], &[1.0]).is_err());
}

#[test]
fn lipschitz_of_a_known_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<Vec<f32>> = (0..200).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let fx: Vec<Vec<f32>> = x.iter().map(|v| vec![2.0 * v[0], 0.5 * v[1]]).collect();
    let xr: Vec<&[f32]> = x.iter().map(|v| v.as_slice()).collect();
    let fr: Vec<&[f32]> = fx.iter().map(|v| v.as_slice()).collect();
    let l = lipschitz_estimate(&xr, &fr, &random_pairs(x.len(), 1000, 1));
    assert!((1.6..=2.0 + 1e-6).contains(&l), "{l}");
    let half = lipschitz_estimate(&xr, &fr, &random_pairs(x.len(), 500, 1));
    assert!(half <= l);
    assert_eq!(random_pairs(10, 50, 3)[..25], random_pairs(10, 25, 3)[..]);
    assert!(random_pairs(10, 50, 3).iter().all(|(i, j)| i != j));
}

#[test]
fn rre_and_rma_definitions() {
    let (grid, acq) = setup();
    let solver = WaveSolver::default();
    let m = tiny_model();
    let ds = build_dataset(2, &ModelStyle::new(Family::FlatLayers), &grid, &acq, Noise::Absolute(0.0), 1, Split::Test, &solver)
        .unwrap();
    let calls = solver.calls();
    let q_hat = ds.model(0).unwrap().into_qsq();
    let b_hat = m.surrogate_forward(&q_hat.clone().reshape(&[1, 16, 16]).unwrap(), 128).unwrap();
    let b_hat = b_hat.reshape(&[2, 8, 128]).unwrap();
    assert_eq!(rre(&m, &b_hat, &q_hat).unwrap(), 0.0);

    let b = ds.data(0).unwrap().into_tensor();
    let scaled = b.map(|v| 3.0 * v);
    let direct = pairedinv::tensor::dist(scaled.data(), b_hat.data()) / scaled.norm();
    assert!((rre(&m, &scaled, &q_hat).unwrap() - direct).abs() <= 1e-12 * direct);

    let back = m
        .norm
        .model_out(&m.model_roundtrip(&m.norm.model_in(&q_hat.clone().reshape(&[1, 16, 16]).unwrap()).unwrap()).unwrap())
        .unwrap();
    let direct = pairedinv::tensor::dist(back.data(), q_hat.data()) / q_hat.norm();
    assert!((rma(&m, &q_hat).unwrap() - direct).abs() <= 1e-12 * direct);
    assert!(rre(&m, &Tensor::zeros(&[2, 8, 128]), &q_hat).is_err());

    let ev = evaluate(&m, &ds.data, 1500.0, 4000.0, 1).unwrap();
    assert_eq!(ev.points.len(), 2);
    assert!((ev.points[1].rma - rma(&m, &Tensor::from_vec(&[16, 16], ev.q_hat.batch_item(1).to_vec()).unwrap()).unwrap()).abs() < 1e-12);
    assert_eq!(solver.calls(), calls, "metrics must not call the solver");
}

#[test]
fn constants_and_bounds_on_a_small_problem() {
    let (grid, acq) = setup();
    let solver = WaveSolver::default();
    let m = tiny_model();
    let style = ModelStyle::new(Family::FlatLayers);
    let val = build_dataset(12, &style, &grid, &acq, Noise::Relative(0.01), 2, Split::Validation, &solver).unwrap();
    let test = build_dataset(6, &style, &grid, &acq, Noise::Relative(0.01), 3, Split::Test, &solver).unwrap();
    let c = estimate_constants(&m, &val, 50, 0, 1500.0, 4000.0).unwrap();
    assert_eq!(c.xi_m, 0.0);
    assert_eq!(c.m_dagger_norm, 1.0);
    let more = estimate_constants(&m, &val, 100, 0, 1500.0, 4000.0).unwrap();
    for (a, b) in [(c.l_forward, more.l_forward), (c.l_q, more.l_q), (c.l_b, more.l_b), (c.l_ae, more.l_ae)] {
        assert!(b >= a);
    }
    assert_eq!(c.theorem_bound(), c.l_q * (c.l_b * c.delta + c.xi_b) + c.xi_q);

    let report = bound_report(&m, &test, &c, &solver, &grid, &acq, 1500.0, 4000.0).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.prop1_rate2(), 1.0);
    let mut forced = c;
    forced.l_ae = 1.5;
    let r2 = bound_report(&m, &test, &forced, &solver, &grid, &acq, 1500.0, 4000.0).unwrap();
    assert!(r2.rows.iter().all(|r| r.prop2_bound.is_none() && r.prop2_holds().is_none()));
    assert!(r2.to_csv().contains("inapplicable"));
    forced.l_ae = 0.5;
    let r3 = bound_report(&m, &test, &forced, &solver, &grid, &acq, 1500.0, 4000.0).unwrap();
    assert!(r3.rows.iter().all(|r| r.prop2_bound.is_some()));
}
