//! Central finite-difference checks of every layer and of the PDE misfit gradient.
use pairedinv::nn::{gradient_check, layer_gradient_check, GradCheckOptions, Layer, LayerSpec, Mode};
use pairedinv::tensor::half_sq_dist;
use pairedinv::wave::{default_t0, ricker, stable_dt, Acquisition, Grid2D, VelocityModel, WaveSolver};
use pairedinv::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pairedinv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let specs = [
        LayerSpec::Conv3x3 { channels: 2 },
        LayerSpec::ConvCc { in_channels: 2, out_channels: 3 },
        LayerSpec::Silu,
        LayerSpec::Norm { channels: 2 },
        LayerSpec::Avgpool2,
        LayerSpec::Upsample2,
        LayerSpec::Affine { in_features: 32, out_features: 5 },
        LayerSpec::ResnetBlock { channels: 2, h: 0.5 },
    ];
    for spec in specs {
        let layer = Layer::<f64>::new(&spec, &mut rng)?;
        let x = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let opts = GradCheckOptions { probes: None, ..GradCheckOptions::tol(1e-5) };
        let rep = layer_gradient_check(&layer, &x, Mode::Train, &opts)?;
        println!("{:<40} max rel err {:.2e} pass {}", format!("{spec:?}"), rep.max_rel_err, rep.pass);
    }

    let grid = Grid2D::new(16, 16, 10.0, 10.0)?;
    let dt = stable_dt(&grid, 4000.0, 0.8);
    let acq = Acquisition::line(&grid, 2, 5, 1, 160, dt, ricker(25.0, 160, dt, default_t0(25.0))?)?;
    let model = VelocityModel::<f64>::homogeneous(grid, 2500.0)?;
    let truth = VelocityModel::<f64>::homogeneous(grid, 2600.0)?;
    let solver = WaveSolver::default();
    let b = solver.simulate(&truth, &acq)?;
    let (_, g) = solver.misfit_and_gradient(&model, &acq, &b)?;
    let value = |q: &[f64]| {
        let m = VelocityModel::new(grid, Tensor::from_vec(&[16, 16], q.to_vec()).unwrap()).unwrap();
        half_sq_dist(solver.simulate(&m, &acq).unwrap().values().data(), b.values().data())
    };
    let q0 = model.qsq().data().to_vec();
    let opts = GradCheckOptions { step: 1e-5 * q0[0], probes: Some(16), ..GradCheckOptions::tol(1e-4) };
    let rep = gradient_check(value, &q0, g.data(), &opts);
    println!("PDE misfit gradient: max rel err {:.2e} pass {}", rep.max_rel_err, rep.pass);
    Ok(())
}
