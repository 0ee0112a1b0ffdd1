use pairedinv::nn::{gradient_check, GradCheckOptions};
use pairedinv::tensor::{half_sq_dist, Tensor};
use pairedinv::wave::{
    default_t0, ricker, stable_dt, Acquisition, DataCube, Grid2D, VelocityModel, WaveSolver,
};
use pairedinv::Error;

fn small_setup(n: usize) -> (VelocityModel<f64>, Acquisition) {
    let grid = Grid2D::new(n, n, 10.0, 10.0).unwrap();
    // smooth heterogeneous model
    let q = Tensor::from_fn(&[n, n], |i| {
        let (z, x) = ((i / n) as f64, (i % n) as f64);
        let c = 2000.0 + 600.0 * (z / n as f64) + 150.0 * (0.4 * x).sin();
        c * c
    });
    let model = VelocityModel::new(grid, q).unwrap();
    let dt = stable_dt(&grid, 4000.0, 0.8);
    let nt = 160;
    let w = ricker(25.0, nt, dt, default_t0(25.0)).unwrap();
    let acq = Acquisition::line(&grid, 2, 5, 1, nt, dt, w).unwrap();
    (model, acq)
}

#[test]
fn zero_wavelet_gives_zero_data() {
    let (model, acq) = small_setup(16);
    let acq = acq.with_wavelet(vec![0.0; acq.nt]);
    let d = WaveSolver::default().simulate(&model, &acq).unwrap();
    assert!(d.values().data().iter().all(|&v| v == 0.0));
}

#[test]
fn doubling_wavelet_doubles_data_exactly() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    let d1 = solver.simulate(&model, &acq).unwrap();
    let w2 = acq.wavelet.iter().map(|v| 2.0 * v).collect();
    let d2 = solver.simulate(&model, &acq.with_wavelet(w2)).unwrap();
    for (a, b) in d1.values().data().iter().zip(d2.values().data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn simulate_is_linear_in_source() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    let w1 = acq.wavelet.clone();
    let w2: Vec<f64> = (0..acq.nt).map(|k| (0.05 * k as f64).sin() * (-0.01 * k as f64).exp()).collect();
    let (a, b) = (0.7, -1.3);
    let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
    let d1 = solver.simulate(&model, &acq.with_wavelet(w1)).unwrap();
    let d2 = solver.simulate(&model, &acq.with_wavelet(w2)).unwrap();
    let dm = solver.simulate(&model, &acq.with_wavelet(mix)).unwrap();
    let scale = dm.values().norm();
    let mut err = 0.0f64;
    for ((x, y), m) in d1.values().data().iter().zip(d2.values().data()).zip(dm.values().data()) {
        err = err.max((a * x + b * y - m).abs());
    }
    assert!(err <= 1e-13 * scale, "linearity defect {err} vs norm {scale}");
}

#[test]
fn first_arrival_matches_travel_time() {
    // a pulse with compact support starting at t0 has a well-defined onset,
    // unlike the Ricker wavelet whose leading lobe precedes its centre
    let (c, h) = (2000.0, 10.0);
    let offset_cells = 40;
    let grid = Grid2D::new(32, offset_cells + 24, h, h).unwrap();
    let model = VelocityModel::<f64>::homogeneous(grid, c).unwrap();
    let dt = stable_dt(&grid, c, 0.8);
    let (t0, width) = (0.05, 0.04);
    let nt = ((0.2 + t0 + 0.1) / dt) as usize;
    let w = (0..nt)
        .map(|k| {
            let s = (k as f64 * dt - t0) / width;
            if (0.0..1.0).contains(&s) {
                (std::f64::consts::PI * s).sin().powi(2)
            } else {
                0.0
            }
        })
        .collect();
    let acq = Acquisition {
        sources: vec![[16, 12]],
        receivers: vec![[16, 12 + offset_cells]],
        nt,
        dt,
        wavelet: w,
    };
    let d = WaveSolver::default().simulate(&model, &acq).unwrap();
    let trace = d.shot(0);
    let peak = trace.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = trace.iter().position(|v| v.abs() > 0.01 * peak).unwrap();
    // sample k records u^{k+1}
    let t_first = (k + 1) as f64 * dt;
    let expected = offset_cells as f64 * h / c + t0;
    let tol = 2.0 * h / c;
    assert!(
        (t_first - expected).abs() <= tol,
        "first arrival {t_first:.4} s, expected {expected:.4} ± {tol}"
    );
}

#[test]
fn misfit_vanishes_at_true_model() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    let d = solver.simulate(&model, &acq).unwrap();
    let (phi, g) = solver.misfit_and_gradient(&model, &acq, &d).unwrap();
    assert_eq!(phi, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn misfit_equals_independent_recomputation() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    let b = DataCube::new(Tensor::from_fn(&acq.data_shape(), |i| ((i % 13) as f64 - 6.0) * 1e-6)).unwrap();
    let (phi, _) = solver.misfit_and_gradient(&model, &acq, &b).unwrap();
    let d = solver.simulate(&model, &acq).unwrap();
    assert_eq!(phi, half_sq_dist(d.values().data(), b.values().data()));
}

#[test]
fn gradient_matches_finite_differences_on_patch() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    // observed data from a perturbed model
    let truth = VelocityModel::new(
        *model.grid(),
        model.qsq().map(|q| q * 1.05),
    )
    .unwrap();
    let b = solver.simulate(&truth, &acq).unwrap();
    let (_, grad) = solver.misfit_and_gradient(&model, &acq, &b).unwrap();

    let patch: Vec<usize> = (4..12).flat_map(|z| (4..12).map(move |x| z * 16 + x)).collect();
    let base: Vec<f64> = patch.iter().map(|&i| model.qsq().data()[i]).collect();
    let analytic: Vec<f64> = patch.iter().map(|&i| grad.data()[i]).collect();
    let value = |v: &[f64]| {
        let mut q = model.qsq().clone();
        for (&i, &x) in patch.iter().zip(v) {
            q.data_mut()[i] = x;
        }
        let m = VelocityModel::new(*model.grid(), q).unwrap();
        let d = solver.simulate(&m, &acq).unwrap();
        half_sq_dist(d.values().data(), b.values().data())
    };
    let opts = GradCheckOptions {
        step: 1e-5 * base[0],
        probes: Some(16),
        seed: 7,
        tol: 1e-4,
        floor: 1e-3,
    };
    let rep = gradient_check(value, &base, &analytic, &opts);
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn negated_residual_negates_gradient() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    let d = solver.simulate(&model, &acq).unwrap();
    let b = DataCube::new(d.values().map(|v| 0.9 * v + 1e-7)).unwrap();
    let flipped = DataCube::new(Tensor::from_fn(&acq.data_shape(), |i| {
        2.0 * d.values().data()[i] - b.values().data()[i]
    }))
    .unwrap();
    let (_, g1) = solver.misfit_and_gradient(&model, &acq, &b).unwrap();
    let (_, g2) = solver.misfit_and_gradient(&model, &acq, &flipped).unwrap();
    let scale = g1.norm();
    for (x, y) in g1.data().iter().zip(g2.data()) {
        assert!((x + y).abs() <= 1e-12 * scale, "{x} vs {y}");
    }
}

#[test]
fn dot_product_test_double_precision() {
    let solver = WaveSolver::default();
    for n in [16, 32] {
        let (model, acq) = small_setup(n);
        for seed in 0..5 {
            let r = solver.dot_product_test(&model, &acq, seed).unwrap();
            assert!(r <= 1e-10, "n={n} seed={seed}: {r:e}");
        }
    }
}

#[test]
fn dot_product_test_single_precision() {
    let (model, acq) = small_setup(16);
    let m32 = VelocityModel::new(*model.grid(), model.qsq().cast::<f32>()).unwrap();
    let r = WaveSolver::default().dot_product_test(&m32, &acq, 3).unwrap();
    assert!(r <= 1e-4, "{r:e}");
}

#[test]
fn dot_product_test_zero_perturbation() {
    let (model, acq) = small_setup(16);
    let dq = Tensor::zeros(&[16, 16]);
    let v = DataCube::new(Tensor::full(&acq.data_shape(), 1.0)).unwrap();
    assert_eq!(WaveSolver::default().adjoint_mismatch(&model, &acq, &dq, &v).unwrap(), 0.0);
}

#[test]
fn interior_energy_decays_after_source_stops() {
    let n = 48;
    let grid = Grid2D::new(n, n, 10.0, 10.0).unwrap();
    let c = 2500.0;
    let model = VelocityModel::<f64>::homogeneous(grid, c).unwrap();
    let dt = stable_dt(&grid, 4000.0, 0.8);
    let nt = 700;
    let f = 15.0;
    let t0 = default_t0(f);
    let stop = (2.0 * t0 / dt) as usize;
    let mut w = ricker(f, nt, dt, t0).unwrap();
    w[stop..].iter_mut().for_each(|v| *v = 0.0);
    let acq = Acquisition { sources: vec![[24, 24]], receivers: vec![[1, 1]], nt, dt, wavelet: w };

    let (h, q) = (10.0f64, c * c);
    let mut prev: Option<Vec<f64>> = None;
    let mut energy = Vec::new();
    WaveSolver::default()
        .simulate_observed(&model, &acq, 0, &mut |s| {
            let cur: Vec<f64> = (0..n * n).map(|i| s.at(i / n, i % n)).collect();
            if let Some(p) = &prev {
                let mut e = 0.0;
                for iz in 0..n {
                    for ix in 0..n {
                        let i = iz * n + ix;
                        let v = (cur[i] - p[i]) / dt;
                        e += v * v / q;
                        if ix + 1 < n {
                            e += (cur[i + 1] - cur[i]) * (p[i + 1] - p[i]) / (h * h);
                        }
                        if iz + 1 < n {
                            e += (cur[i + n] - cur[i]) * (p[i + n] - p[i]) / (h * h);
                        }
                    }
                }
                energy.push((s.step, e));
            }
            prev = Some(cur);
        })
        .unwrap();
    let after: Vec<f64> = energy.iter().filter(|(k, _)| *k > stop).map(|e| e.1).collect();
    let e0 = after[0];
    assert!(e0 > 0.0);
    for pair in after.windows(2) {
        assert!(pair[1] <= pair[0] + 0.01 * e0, "energy rose from {} to {}", pair[0], pair[1]);
    }
    assert!(*after.last().unwrap() < 0.05 * e0, "wave did not leave the interior");
}

#[test]
fn simulate_is_deterministic() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    let a = solver.simulate(&model, &acq).unwrap();
    let b = solver.simulate(&model, &acq).unwrap();
    let bits = |d: &DataCube<f64>| d.values().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn cfl_violation_rejected() {
    let (model, mut acq) = small_setup(16);
    acq.dt = 3e-3;
    assert!(matches!(WaveSolver::default().simulate(&model, &acq), Err(Error::Cfl { .. })));
}

#[test]
fn storage_limit_reported() {
    let (model, acq) = small_setup(16);
    let mut solver = WaveSolver::default();
    solver.storage_limit = 1000;
    let d = DataCube::zeros(&acq);
    match solver.misfit_and_gradient(&model, &acq, &d) {
        Err(Error::Storage { required, limit }) => {
            assert_eq!(limit, 1000);
            assert_eq!(required, solver.storage_required(&model, &acq));
        }
        other => panic!("expected storage error, got {other:?}"),
    }
}

#[test]
fn blow_up_names_step() {
    let (model, acq) = small_setup(16);
    let m32 = VelocityModel::new(*model.grid(), model.qsq().cast::<f32>()).unwrap();
    let mut w = vec![0.0; acq.nt];
    w[5] = 1e300;
    match WaveSolver::default().simulate(&m32, &acq.with_wavelet(w)) {
        Err(Error::BlowUp { step, .. }) => assert!(step >= 5 && step < 5 + 16),
        other => panic!("expected blow-up, got {other:?}"),
    }
}

#[test]
fn solver_calls_are_counted() {
    let (model, acq) = small_setup(16);
    let solver = WaveSolver::default();
    let d = solver.simulate(&model, &acq).unwrap();
    solver.misfit_and_gradient(&model, &acq, &d).unwrap();
    assert_eq!(solver.calls(), 2);
    let shared = WaveSolver::default().with_counter(solver.counter());
    shared.simulate(&model, &acq).unwrap();
    assert_eq!(solver.calls(), 3);
}
