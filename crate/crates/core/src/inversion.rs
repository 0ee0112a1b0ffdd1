//! Basic inversion over the model grid and latent-space inversion through the
//! model decoder.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::PairedDataset;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Mode};
use crate::paired::PairedModel;
use crate::tensor::{half_sq_dist, Real, Tensor};
use crate::wave::{relative_velocity_error, Acquisition, DataCube, Grid2D, VelocityModel, WaveSolver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bi,
    Lsi,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Bi => "BI",
            Method::Lsi => "LSI",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    Basic,
    Warm,
}

impl Start {
    pub fn label(self) -> &'static str {
        match self {
            Start::Basic => "basic",
            Start::Warm => "warm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub method: Method,
    pub start: Start,
    #[serde(default)]
    pub alpha: f64,
    pub iters: usize,
    pub lr: f64,
    /// Velocity box; BI clamps `q` to `[c_min², c_max²]`, LSI clamps the decoded model.
    pub c_min: f64,
    pub c_max: f64,
}

impl InversionConfig {
    pub fn new(method: Method, start: Start, alpha: f64, iters: usize) -> Self {
        InversionConfig {
            method,
            start,
            alpha,
            iters,
            lr: 1e-2,
            c_min: 1500.0,
            c_max: 4000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.method == Method::Bi && self.alpha != 0.0 {
            return Err(Error::Config("basic inversion has no regularizer; alpha must be 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.c_min > 0.0 && self.c_min < self.c_max) {
            return Err(Error::Config(format!("bad velocity box [{}, {}]", self.c_min, self.c_max)));
        }
        Ok(())
    }

    fn q_box(&self) -> (f64, f64) {
        (self.c_min * self.c_min, self.c_max * self.c_max)
    }
}

/// The four configurations of the comparison table.
pub fn table_configs(iters: usize) -> [InversionConfig; 4] {
    [
        InversionConfig::new(Method::Bi, Start::Basic, 0.0, iters),
        InversionConfig::new(Method::Bi, Start::Warm, 0.0, iters),
        InversionConfig::new(Method::Lsi, Start::Basic, 0.0, iters),
        InversionConfig::new(Method::Lsi, Start::Warm, 1.0, iters),
    ]
}

/// Per-iteration record; index 0 is the start point.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionTrace<T> {
    /// Relative data misfit `‖F(q) − b‖/‖b‖`.
    pub misfit: Vec<f64>,
    /// Data term of the minimized objective, in the method's own units.
    pub objective: Vec<f64>,
    pub reg: Vec<f64>,
    /// Relative velocity error, when the truth is known.
    pub model_err: Option<Vec<f64>>,
    /// Final squared-velocity model `[nz, nx]`.
    pub final_model: Tensor<T>,
    pub final_latent: Option<Vec<T>>,
    pub solver_calls: u64,
}

impl<T: Real> InversionTrace<T> {
    fn new(iters: usize, with_truth: bool) -> Self {
        InversionTrace {
            misfit: Vec::with_capacity(iters + 1),
            objective: Vec::with_capacity(iters + 1),
            reg: Vec::with_capacity(iters + 1),
            model_err: with_truth.then(|| Vec::with_capacity(iters + 1)),
            final_model: Tensor::zeros(&[1]),
            final_latent: None,
            solver_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.misfit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.misfit.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,misfit,reg,model_err\n");
        for k in 0..self.len() {
            let err = self.model_err.as_ref().map_or(String::new(), |e| format!("{:.9e}", e[k]));
            let _ = writeln!(s, "{k},{:.9e},{:.9e},{err}", self.misfit[k], self.reg[k]);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// `‖a − r‖ / ‖r‖`.
pub fn relative_error<T: Real>(a: &[T], r: &[T]) -> Result<f64> {
    if a.len() != r.len() {
        return Err(Error::shape(format!("lengths {} and {} differ", a.len(), r.len())));
    }
    let den = crate::tensor::norm(r);
    if den == 0.0 {
        return Err(Error::Invalid("relative error against a zero reference".into()));
    }
    Ok(crate::tensor::dist(a, r) / den)
}

/// Laterally invariant start: velocity linear in depth from `c_min` to `c_max`.
pub fn basic_start<T: Real>(grid: &Grid2D, c_min: f64, c_max: f64) -> Result<VelocityModel<T>> {
    let (nz, nx) = (grid.nz, grid.nx);
    let c = Tensor::from_fn(&[nz, nx], |i| T::of(c_min + (c_max - c_min) * (i / nx) as f64 / (nz - 1) as f64));
    VelocityModel::from_velocity(*grid, &c)
}

fn clamp_model<T: Real>(q: &[T], lo: f64, hi: f64) -> (Vec<T>, Vec<bool>) {
    let (lo, hi) = (T::of(lo), T::of(hi));
    let mut mask = Vec::with_capacity(q.len());
    let out = q
        .iter()
        .map(|&v| {
            let c = v.max(lo).min(hi);
            mask.push(c == v);
            c
        })
        .collect();
    (out, mask)
}

/// Observed data, the physics used to explain it, and the truth if known.
#[derive(Clone, Copy)]
pub struct Problem<'a, T> {
    pub solver: &'a WaveSolver,
    pub grid: Grid2D,
    pub acq: &'a Acquisition,
    pub b_obs: &'a DataCube<T>,
    pub truth: Option<&'a Tensor<T>>,
}

impl<T: Real> Problem<'_, T> {
    fn check(&self) -> Result<()> {
        self.b_obs.check_matches(self.acq)?;
        if let Some(t) = self.truth {
            if t.shape() != self.grid.shape() {
                return Err(Error::shape(format!(
                    "truth {:?} does not match grid {:?}",
                    t.shape(),
                    self.grid.shape()
                )));
            }
        }
        Ok(())
    }

    /// Objective `½‖F(q) − b‖²` at a point, by a plain forward solve.
    pub fn data_objective(&self, q: &VelocityModel<T>) -> Result<f64> {
        let f = self.solver.simulate(q, self.acq)?;
        Ok(half_sq_dist(f.values().data(), self.b_obs.values().data()))
    }
}

fn record<T: Real>(
    trace: &mut InversionTrace<T>,
    phi: f64,
    b_norm: f64,
    objective: f64,
    reg: f64,
    q: &[T],
    truth: Option<&Tensor<T>>,
) {
    trace.misfit.push((2.0 * phi).sqrt() / b_norm);
    trace.objective.push(objective);
    trace.reg.push(reg);
    if let (Some(errs), Some(t)) = (trace.model_err.as_mut(), truth) {
        errs.push(relative_velocity_error(q, t.data()));
    }
}

/// Adam on `½‖F(q) − b‖²` over the grid, clamped to the velocity box.
///
/// The optimizer runs on `p = q/s` with `s = mean|q0|`; this is carried out
/// directly on `q` with `lr·s` and `eps/s`, which is the same update.
pub fn basic_inversion<T: Real>(
    p: &Problem<'_, T>,
    q0: &VelocityModel<T>,
    cfg: &InversionConfig,
) -> Result<InversionTrace<T>> {
    cfg.validate()?;
    if cfg.method != Method::Bi {
        return Err(Error::Config("basic_inversion needs method = bi".into()));
    }
    p.check()?;
    let grid = p.grid;
    if *q0.grid() != grid {
        return Err(Error::shape("start model grid differs from the problem grid"));
    }
    let Problem {
        solver,
        acq,
        b_obs,
        truth,
        ..
    } = *p;
    let (lo, hi) = cfg.q_box();
    let s = q0.qsq().data().iter().map(|v| v.f64().abs()).sum::<f64>() / q0.qsq().len() as f64;
    let base = AdamConfig::default();
    let mut adam = Adam::<T>::new(
        AdamConfig {
            lr: cfg.lr * s,
            eps: base.eps / s,
            ..base
        },
        &[grid.cells()],
    )?;
    let b_norm = b_obs.values().norm();
    let calls0 = solver.calls();
    let mut q = q0.qsq().clone();
    let mut trace = InversionTrace::new(cfg.iters, truth.is_some());
    for k in 0..=cfg.iters {
        let model = VelocityModel::new(grid, q.clone())?;
        let (phi, g) = solver.misfit_and_gradient(&model, acq, b_obs)?;
        record(&mut trace, phi, b_norm, phi, 0.0, q.data(), truth);
        if k == cfg.iters {
            break;
        }
        adam.step(&mut [q.data_mut()], &[g.data()])?;
        let (c, _) = clamp_model(q.data(), lo, hi);
        q.data_mut().copy_from_slice(&c);
    }
    trace.final_model = q;
    trace.solver_calls = solver.calls() - calls0;
    Ok(trace)
}

/// `z* = M† E_b(b̃)` for physical data.
pub fn warm_latent<T: Real>(m: &PairedModel<T>, b_obs: &DataCube<T>) -> Result<Vec<T>> {
    let s = b_obs.shape();
    let b = b_obs.values().clone().reshape(&[1, s[0], s[1], s[2]])?;
    Ok(m.latent_map_dagger(&m.encode_data(&m.norm.data_in(&b)?)?)?.into_vec())
}

/// `E_q(q̃0)` for a physical model.
pub fn model_latent<T: Real>(m: &PairedModel<T>, q0: &VelocityModel<T>) -> Result<Vec<T>> {
    let g = q0.grid();
    let q = q0.qsq().clone().reshape(&[1, g.nz, g.nx])?;
    Ok(m.encode_model(&m.norm.model_in(&q)?)?.into_vec())
}

/// Physical squared velocities `D_q(z)` clamped to the box, `[nz, nx]`.
pub fn decode_clamped<T: Real>(m: &PairedModel<T>, z: &[T], cfg: &InversionConfig) -> Result<Tensor<T>> {
    let zt = Tensor::from_vec(&[1, z.len()], z.to_vec())?;
    let q = m.norm.model_out(&m.decode_model(&zt)?)?;
    let (lo, hi) = cfg.q_box();
    let [_, nz, nx] = m.model_shape();
    Tensor::from_vec(&[nz, nx], clamp_model(q.data(), lo, hi).0)
}

/// Adam on `½‖F(D_q(z)) − b‖²/b_scale² + (α/2)‖z − z*‖²` starting from `z0`.
///
/// The decoded model is clamped to the velocity box; clamped cells pass no
/// gradient.
pub fn latent_space_inversion<T: Real>(
    p: &Problem<'_, T>,
    m: &PairedModel<T>,
    z_star: &[T],
    z0: &[T],
    cfg: &InversionConfig,
) -> Result<InversionTrace<T>> {
    cfg.validate()?;
    if cfg.method != Method::Lsi {
        return Err(Error::Config("latent_space_inversion needs method = lsi".into()));
    }
    p.check()?;
    let Problem {
        solver,
        grid,
        b_obs,
        truth,
        ..
    } = *p;
    let d = m.arch.latent_dim;
    if z_star.len() != d || z0.len() != d {
        return Err(Error::shape(format!(
            "latent vectors of length {}/{}, expected {d}",
            z_star.len(),
            z0.len()
        )));
    }
    let [_, nz, nx] = m.model_shape();
    if grid.shape() != [nz, nx] {
        return Err(Error::shape(format!("decoder emits {nz}x{nx}, grid is {:?}", grid.shape())));
    }
    let mut adam = Adam::<T>::new(AdamConfig::with_lr(cfg.lr), &[d])?;
    let b_norm = b_obs.values().norm();
    let calls0 = solver.calls();
    let mut z = z0.to_vec();
    let mut trace = InversionTrace::new(cfg.iters, truth.is_some());
    let mut q_final = Tensor::zeros(&[nz, nx]);
    for k in 0..=cfg.iters {
        let e = lsi_objective_and_gradient(p, m, &z, z_star, cfg)?;
        record(&mut trace, e.phi, b_norm, e.objective, e.reg, e.model.data(), truth);
        q_final = e.model;
        if k == cfg.iters {
            break;
        }
        adam.step(&mut [&mut z], &[&e.grad])?;
    }
    trace.final_model = q_final;
    trace.final_latent = Some(z);
    trace.solver_calls = solver.calls() - calls0;
    Ok(trace)
}

/// One evaluation of the latent-space objective.
#[derive(Clone, Debug)]
pub struct LsiEval<T> {
    /// `½‖F(q) − b‖²` in physical units.
    pub phi: f64,
    /// `phi / b_scale²`.
    pub objective: f64,
    pub reg: f64,
    /// Clamped decoded model `[nz, nx]`.
    pub model: Tensor<T>,
    pub grad: Vec<T>,
}

/// Objective terms and the exact gradient with respect to `z`: the PDE
/// adjoint gradient pulled back through the clamp and the decoder, plus
/// `α(z − z*)`.
pub fn lsi_objective_and_gradient<T: Real>(
    p: &Problem<'_, T>,
    m: &PairedModel<T>,
    z: &[T],
    z_star: &[T],
    cfg: &InversionConfig,
) -> Result<LsiEval<T>> {
    let (lo, hi) = cfg.q_box();
    let inv_b2 = 1.0 / (m.norm.b_scale * m.norm.b_scale);
    let zt = Tensor::from_vec(&[1, z.len()], z.to_vec())?;
    let (qn, caches) = m.dec_model.apply(&zt, Mode::Frozen)?;
    let q = m.norm.model_out(&qn)?;
    let (qc, mask) = clamp_model(q.data(), lo, hi);
    let qc = Tensor::from_vec(&p.grid.shape(), qc)?;
    let model = VelocityModel::new(p.grid, qc.clone())?;
    let (phi, g) = p.solver.misfit_and_gradient(&model, p.acq, p.b_obs)?;
    let reg = 0.5 * cfg.alpha * crate::tensor::dist(z, z_star).powi(2);

    let k_q = T::of(m.norm.q_scale * inv_b2);
    let gq: Vec<T> = g
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &free)| if free { v * k_q } else { T::zero() })
        .collect();
    let mut grad = m.dec_model.backward_input(&caches, &Tensor::from_vec(qn.shape(), gq)?)?.into_vec();
    let a = T::of(cfg.alpha);
    for ((g, zi), si) in grad.iter_mut().zip(z).zip(z_star) {
        *g += a * (*zi - *si);
    }
    Ok(LsiEval {
        phi,
        objective: phi * inv_b2,
        reg,
        model: qc,
        grad,
    })
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(v: &[f64]) -> Stat {
        if v.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub config: InversionConfig,
    pub misfit_init: Stat,
    pub misfit_final: Stat,
    pub err_init: Stat,
    pub err_final: Stat,
    pub n_samples: usize,
    pub failures: usize,
}

pub const SUITE_HEADER: &str = "method,start,alpha,misfit_init_mean,misfit_init_std,misfit_final_mean,misfit_final_std,err_init_mean,err_init_std,err_final_mean,err_final_std,n_samples";

impl SuiteRow {
    pub fn csv_row(&self) -> String {
        let c = &self.config;
        let mut s = format!("{},{},{}", c.method.label(), c.start.label(), c.alpha);
        for st in [self.misfit_init, self.misfit_final, self.err_init, self.err_final] {
            let _ = write!(s, ",{:.9e},{:.9e}", st.mean, st.std);
        }
        let _ = write!(s, ",{}", self.n_samples);
        s
    }
}

pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let mut s = format!("{SUITE_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn write_suite_csv(path: impl AsRef<Path>, rows: &[SuiteRow]) -> Result<()> {
    write_text(path.as_ref(), &suite_csv(rows))
}

#[derive(Clone, Debug)]
pub struct SuiteFailure {
    pub sample: usize,
    pub config: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub rows: Vec<SuiteRow>,
    /// `traces[sample][config]`, `None` where the run failed.
    pub traces: Vec<Vec<Option<InversionTrace<f32>>>>,
    pub failures: Vec<SuiteFailure>,
}

/// Runs one configuration on one problem from the shared starts.
pub fn run_config(
    p: &Problem<'_, f32>,
    m: &PairedModel<f32>,
    cfg: &InversionConfig,
) -> Result<InversionTrace<f32>> {
    let z_star = warm_latent(m, p.b_obs)?;
    match (cfg.method, cfg.start) {
        (Method::Bi, Start::Basic) => basic_inversion(p, &basic_start(&p.grid, cfg.c_min, cfg.c_max)?, cfg),
        (Method::Bi, Start::Warm) => {
            let q = VelocityModel::new(p.grid, decode_clamped(m, &z_star, cfg)?)?;
            basic_inversion(p, &q, cfg)
        }
        (Method::Lsi, Start::Basic) => {
            let z0 = model_latent(m, &basic_start(&p.grid, cfg.c_min, cfg.c_max)?)?;
            latent_space_inversion(p, m, &z_star, &z0, cfg)
        }
        (Method::Lsi, Start::Warm) => latent_space_inversion(p, m, &z_star, &z_star, cfg),
    }
}

/// All configurations on the first `n` test pairs. Samples run in parallel;
/// results are reduced in sample order.
pub fn run_suite(
    solver: &WaveSolver,
    grid: &Grid2D,
    acq: &Acquisition,
    test: &PairedDataset,
    m: &PairedModel<f32>,
    cfgs: &[InversionConfig],
    n: usize,
) -> Result<SuiteOutcome> {
    for c in cfgs {
        c.validate()?;
    }
    let n = n.min(test.len());
    if n == 0 {
        return Err(Error::Invalid("suite needs at least one test pair".into()));
    }
    let per_sample: Vec<Result<Vec<Result<InversionTrace<f32>>>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let b = test.data(i)?;
            let truth = test.model(i)?.into_qsq();
            let p = Problem {
                solver,
                grid: *grid,
                acq,
                b_obs: &b,
                truth: Some(&truth),
            };
            Ok(cfgs.iter().map(|c| run_config(&p, m, c)).collect())
        })
        .collect();

    let mut traces = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for (i, r) in per_sample.into_iter().enumerate() {
        let runs = r?;
        traces.push(
            runs.into_iter()
                .enumerate()
                .map(|(k, t)| match t {
                    Ok(t) => Some(t),
                    Err(e) => {
                        failures.push(SuiteFailure {
                            sample: i,
                            config: k,
                            message: e.to_string(),
                        });
                        None
                    }
                })
                .collect::<Vec<_>>(),
        );
    }
    let rows = cfgs
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let ok: Vec<&InversionTrace<f32>> = traces.iter().filter_map(|t| t[k].as_ref()).collect();
            let col = |f: &dyn Fn(&InversionTrace<f32>) -> f64| Stat::of(&ok.iter().map(|t| f(t)).collect::<Vec<_>>());
            SuiteRow {
                config: *c,
                misfit_init: col(&|t| t.misfit[0]),
                misfit_final: col(&|t| *t.misfit.last().expect("nonempty")),
                err_init: col(&|t| t.model_err.as_ref().expect("truth")[0]),
                err_final: col(&|t| *t.model_err.as_ref().expect("truth").last().expect("nonempty")),
                n_samples: ok.len(),
                failures: n - ok.len(),
            }
        })
        .collect();
    Ok(SuiteOutcome { rows, traces, failures })
}
