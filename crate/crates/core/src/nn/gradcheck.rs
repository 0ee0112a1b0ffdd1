//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{Layer, Mode};
use crate::{Result, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Number of coordinates probed; all of them when `None`.
    pub probes: Option<usize>,
    pub seed: u64,
    pub tol: f64,
    /// Relative errors are measured against `max(|a|, |n|, floor * max|a|)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-6,
            probes: Some(64),
            seed: 0,
            tol: 1e-5,
            floor: 1e-3,
        }
    }
}

impl GradCheckOptions {
    pub fn tol(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub probed: usize,
    pub pass: bool,
}

/// Compare `analytic` against central differences of `value` around `params`.
pub fn gradient_check(
    mut value: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let n = params.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let idx: Vec<usize> = match opts.probes {
        Some(k) if k < n => {
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (opts.floor * scale).max(f64::MIN_POSITIVE);

    let mut x = params.to_vec();
    let mut worst = 0;
    let mut max_rel = 0.0f64;
    for &i in &idx {
        let orig = x[i];
        x[i] = orig + opts.step;
        let fp = value(&x);
        x[i] = orig - opts.step;
        let fm = value(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * opts.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if !(rel <= max_rel) {
            max_rel = rel;
            worst = i;
        }
    }
    GradCheckReport {
        max_rel_err: max_rel,
        worst,
        probed: idx.len(),
        pass: max_rel <= opts.tol,
    }
}

/// Checks d/d(x, θ) of `Σ r·layer(x)` for a random `r` drawn from `opts.seed`.
pub fn layer_gradient_check(layer: &Layer<f64>, x: &Tensor<f64>, mode: Mode, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let (y, cache) = layer.apply(x, mode)?;
    let r = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
    let (gx, gp) = layer.backward(&cache, &r)?;
    let nx = x.len();
    let mut point = x.data().to_vec();
    point.extend(layer.params().iter().flat_map(|p| p.data().iter().copied()));
    let mut analytic = gx.data().to_vec();
    analytic.extend(gp.iter().flat_map(|g| g.data().iter().copied()));

    let mut probe = layer.clone();
    let xshape = x.shape().to_vec();
    let value = |v: &[f64]| {
        let mut off = nx;
        for p in probe.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        }
        let xt = Tensor::from_vec(&xshape, v[..nx].to_vec()).expect("shape");
        let (y, _) = probe.apply(&xt, mode).expect("probe forward");
        crate::tensor::dot(y.data(), r.data())
    };
    Ok(gradient_check(value, &point, &analytic, opts))
}
