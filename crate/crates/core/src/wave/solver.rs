use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_cfl, Acquisition, DataCube, VelocityModel};
use crate::error::{Error, Result};
use crate::tensor::{dot, half_sq_dist, Real, Tensor};

/// Absorbing layer around the physical grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpongeConfig {
    pub cells: usize,
    /// Velocity used to size the damping profile. Kept independent of the
    /// model so that the discrete map stays smooth in `q`.
    pub velocity: f64,
    /// Target reflection coefficient at normal incidence.
    pub reflection: f64,
}

impl Default for SpongeConfig {
    fn default() -> Self {
        SpongeConfig {
            cells: 20,
            velocity: 4000.0,
            reflection: 1e-3,
        }
    }
}

/// Finite-difference solver with an injectable call counter.
///
/// `simulate`, `misfit_and_gradient`, `born` and `born_adjoint` each count as
/// one solver call.
#[derive(Clone, Debug)]
pub struct WaveSolver {
    pub sponge: SpongeConfig,
    /// Upper bound in bytes for stored forward wavefields.
    pub storage_limit: usize,
    calls: Arc<AtomicU64>,
}

impl Default for WaveSolver {
    fn default() -> Self {
        WaveSolver::new(SpongeConfig::default())
    }
}

/// Index arithmetic for the padded field, which carries the sponge plus a
/// one-cell zero halo on every side.
#[derive(Clone, Copy, Debug)]
pub struct FieldLayout {
    pub nb: usize,
    pub nz: usize,
    pub nx: usize,
    /// Row stride of the padded field.
    pub width: usize,
}

impl FieldLayout {
    fn new(nz: usize, nx: usize, nb: usize) -> Self {
        FieldLayout {
            nb,
            nz,
            nx,
            width: nx + 2 * nb + 2,
        }
    }

    fn pz(&self) -> usize {
        self.nz + 2 * self.nb
    }

    fn px(&self) -> usize {
        self.nx + 2 * self.nb
    }

    pub fn len(&self) -> usize {
        (self.pz() + 2) * self.width
    }

    /// Offset of physical cell `(iz, ix)`.
    pub fn index(&self, iz: usize, ix: usize) -> usize {
        (iz + self.nb + 1) * self.width + ix + self.nb + 1
    }
}

/// Wavefield `u^{step+1}` handed to an observer.
pub struct Snapshot<'a, T> {
    pub step: usize,
    pub field: &'a [T],
    pub layout: FieldLayout,
}

impl<T: Real> Snapshot<'_, T> {
    pub fn at(&self, iz: usize, ix: usize) -> T {
        self.field[self.layout.index(iz, ix)]
    }
}

/// Per-cell coefficients of `u⁺ = A u + B u⁻ + q C (L u + f)`.
struct Medium<T> {
    lay: FieldLayout,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    q: Vec<T>,
    cq: Vec<T>,
    idz2: T,
    idx2: T,
    src_scale: T,
}

impl<T: Real> Medium<T> {
    fn new(model: &VelocityModel<T>, dt: f64, sponge: &SpongeConfig) -> Self {
        let g = model.grid();
        let nb = sponge.cells;
        let lay = FieldLayout::new(g.nz, g.nx, nb);
        let n = lay.len();
        let mut a = vec![T::zero(); n];
        let mut b = vec![T::zero(); n];
        let mut c = vec![T::zero(); n];
        let mut q = vec![T::zero(); n];
        let gmax = if nb > 0 {
            3.0 * sponge.velocity / (2.0 * nb as f64 * g.h_min()) * (1.0 / sponge.reflection).ln()
        } else {
            0.0
        };
        let depth_in = |i: usize, n: usize| -> f64 {
            if i < nb {
                (nb - i) as f64
            } else if i >= nb + n {
                (i + 1 - nb - n) as f64
            } else {
                0.0
            }
        };
        let qs = model.qsq().data();
        for i in 0..lay.pz() {
            let iz = i.saturating_sub(nb).min(g.nz - 1);
            let dz = depth_in(i, g.nz) / nb.max(1) as f64;
            for j in 0..lay.px() {
                let ix = j.saturating_sub(nb).min(g.nx - 1);
                let dx = depth_in(j, g.nx) / nb.max(1) as f64;
                let gamma = gmax * (dz * dz + dx * dx);
                let den = 1.0 + 0.5 * gamma * dt;
                let k = (i + 1) * lay.width + j + 1;
                a[k] = T::of(2.0 / den);
                b[k] = T::of(-(1.0 - 0.5 * gamma * dt) / den);
                c[k] = T::of(dt * dt / den);
                q[k] = qs[iz * g.nx + ix];
            }
        }
        let cq = c.iter().zip(&q).map(|(&c, &q)| c * q).collect();
        Medium {
            lay,
            a,
            b,
            c,
            q,
            cq,
            idz2: T::of(1.0 / (g.dz * g.dz)),
            idx2: T::of(1.0 / (g.dx * g.dx)),
            src_scale: T::of(1.0 / (g.dz * g.dx)),
        }
    }

    /// `p = C·L u`, `un = A u + B up + q p` over the padded interior.
    fn step(&self, u: &[T], up: &[T], un: &mut [T], p: &mut [T]) {
        let w = self.lay.width;
        let nx = self.lay.px();
        let (idz2, idx2) = (self.idz2, self.idx2);
        for i in 1..=self.lay.pz() {
            let r = i * w + 1;
            let c0 = &u[r..r + nx];
            let no = &u[r - w..r - w + nx];
            let so = &u[r + w..r + w + nx];
            let we = &u[r - 1..r - 1 + nx];
            let ea = &u[r + 1..r + 1 + nx];
            let upr = &up[r..r + nx];
            let a = &self.a[r..r + nx];
            let b = &self.b[r..r + nx];
            let c = &self.c[r..r + nx];
            let q = &self.q[r..r + nx];
            let pr = &mut p[r..r + nx];
            let unr = &mut un[r..r + nx];
            for j in 0..nx {
                let two = c0[j] + c0[j];
                let lap = (no[j] + so[j] - two) * idz2 + (we[j] + ea[j] - two) * idx2;
                let pj = c[j] * lap;
                pr[j] = pj;
                unr[j] = a[j] * c0[j] + b[j] * upr[j] + q[j] * pj;
            }
        }
    }

    /// Adjoint update `out = A x1 + B x2 + L y`.
    fn combine(&self, x1: &[T], x2: &[T], y: &[T], out: &mut [T]) {
        let w = self.lay.width;
        let nx = self.lay.px();
        let (idz2, idx2) = (self.idz2, self.idx2);
        for i in 1..=self.lay.pz() {
            let r = i * w + 1;
            let c0 = &y[r..r + nx];
            let no = &y[r - w..r - w + nx];
            let so = &y[r + w..r + w + nx];
            let we = &y[r - 1..r - 1 + nx];
            let ea = &y[r + 1..r + 1 + nx];
            let x1r = &x1[r..r + nx];
            let x2r = &x2[r..r + nx];
            let a = &self.a[r..r + nx];
            let b = &self.b[r..r + nx];
            let o = &mut out[r..r + nx];
            for j in 0..nx {
                let two = c0[j] + c0[j];
                let lap = (no[j] + so[j] - two) * idz2 + (we[j] + ea[j] - two) * idx2;
                o[j] = a[j] * x1r[j] + b[j] * x2r[j] + lap;
            }
        }
    }

    fn inject(&self, k: usize, amp: T, un: &mut [T], p: &mut [T]) {
        let extra = self.c[k] * amp * self.src_scale;
        p[k] += extra;
        un[k] += self.q[k] * extra;
    }

    /// Extend an interior field into the sponge by edge replication.
    fn extend(&self, x: &[T]) -> Vec<T> {
        let lay = self.lay;
        let mut out = vec![T::zero(); lay.len()];
        for i in 0..lay.pz() {
            let iz = i.saturating_sub(lay.nb).min(lay.nz - 1);
            for j in 0..lay.px() {
                let ix = j.saturating_sub(lay.nb).min(lay.nx - 1);
                out[(i + 1) * lay.width + j + 1] = x[iz * lay.nx + ix];
            }
        }
        out
    }

    /// Adjoint of [`Medium::extend`].
    fn fold(&self, x: &[f64]) -> Vec<f64> {
        let lay = self.lay;
        let mut out = vec![0.0; lay.nz * lay.nx];
        for i in 0..lay.pz() {
            let iz = i.saturating_sub(lay.nb).min(lay.nz - 1);
            for j in 0..lay.px() {
                let ix = j.saturating_sub(lay.nb).min(lay.nx - 1);
                out[iz * lay.nx + ix] += x[(i + 1) * lay.width + j + 1];
            }
        }
        out
    }
}

fn check_field<T: Real>(u: &[T], shot: usize, step: usize) -> Result<()> {
    if u.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::BlowUp { shot, step })
    }
}

const BLOWUP_CHECK_EVERY: usize = 16;

impl WaveSolver {
    pub fn new(sponge: SpongeConfig) -> Self {
        WaveSolver {
            sponge,
            storage_limit: 2 << 30,
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Share `counter` for solver-call accounting.
    pub fn with_counter(mut self, counter: Arc<AtomicU64>) -> Self {
        self.calls = counter;
        self
    }

    pub fn counter(&self) -> Arc<AtomicU64> {
        self.calls.clone()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn count(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }

    fn prepare<T: Real>(&self, model: &VelocityModel<T>, acq: &Acquisition) -> Result<Medium<T>> {
        acq.validate(model.grid())?;
        check_cfl(model.c_max(), acq.dt, model.grid())?;
        Ok(Medium::new(model, acq.dt, &self.sponge))
    }

    /// Bytes needed to keep the forward wavefields of all concurrently running shots.
    pub fn storage_required<T: Real>(&self, model: &VelocityModel<T>, acq: &Acquisition) -> usize {
        let g = model.grid();
        let lay = FieldLayout::new(g.nz, g.nx, self.sponge.cells);
        let concurrent = acq.ns().min(rayon::current_num_threads()).max(1);
        concurrent * acq.nt * lay.len() * T::DTYPE.size()
    }

    fn check_storage<T: Real>(&self, model: &VelocityModel<T>, acq: &Acquisition) -> Result<()> {
        let required = self.storage_required(model, acq);
        if required > self.storage_limit {
            return Err(Error::Storage {
                required,
                limit: self.storage_limit,
            });
        }
        Ok(())
    }

    /// Forward run of one shot. Returns traces `[nr·nt]` and, if asked, every
    /// `p^n = C(L u^n + f^n)`.
    fn forward_shot<T: Real>(
        &self,
        med: &Medium<T>,
        acq: &Acquisition,
        shot: usize,
        keep: bool,
        mut observer: Option<&mut dyn FnMut(&Snapshot<T>)>,
    ) -> Result<(Vec<T>, Vec<T>)> {
        let lay = med.lay;
        let n = lay.len();
        let (nt, nr) = (acq.nt, acq.nr());
        let mut up = vec![T::zero(); n];
        let mut u = vec![T::zero(); n];
        let mut un = vec![T::zero(); n];
        let mut scratch = if keep { Vec::new() } else { vec![T::zero(); n] };
        let mut store = if keep { vec![T::zero(); nt * n] } else { Vec::new() };
        let src = lay.index(acq.sources[shot][0], acq.sources[shot][1]);
        let recs: Vec<usize> = acq.receivers.iter().map(|r| lay.index(r[0], r[1])).collect();
        let mut traces = vec![T::zero(); nr * nt];
        for step in 0..nt {
            let p = if keep {
                &mut store[step * n..(step + 1) * n]
            } else {
                &mut scratch[..]
            };
            med.step(&u, &up, &mut un, p);
            med.inject(src, T::of(acq.wavelet[step]), &mut un, p);
            for (r, &k) in recs.iter().enumerate() {
                traces[r * nt + step] = un[k];
            }
            if step % BLOWUP_CHECK_EVERY == BLOWUP_CHECK_EVERY - 1 || step + 1 == nt {
                check_field(&un, shot, step)?;
            }
            if let Some(obs) = observer.as_mut() {
                obs(&Snapshot {
                    step,
                    field: &un,
                    layout: lay,
                });
            }
            std::mem::swap(&mut up, &mut u);
            std::mem::swap(&mut u, &mut un);
        }
        Ok((traces, store))
    }

    /// Backward recursion for one shot driven by `resid` (`[nr·nt]`);
    /// returns the padded gradient `Σ p^n ⊙ λ^{n+1}`.
    fn adjoint_shot<T: Real>(
        &self,
        med: &Medium<T>,
        acq: &Acquisition,
        shot: usize,
        store: &[T],
        resid: &[T],
    ) -> Result<Vec<f64>> {
        let lay = med.lay;
        let n = lay.len();
        let nt = acq.nt;
        let recs: Vec<usize> = acq.receivers.iter().map(|r| lay.index(r[0], r[1])).collect();
        let mut l2 = vec![T::zero(); n];
        let mut l1 = vec![T::zero(); n];
        let mut lk = vec![T::zero(); n];
        let mut tmp = vec![T::zero(); n];
        let mut grad = vec![0.0f64; n];
        for k in (1..=nt).rev() {
            for ((t, &l), &cq) in tmp.iter_mut().zip(&l1).zip(&med.cq) {
                *t = cq * l;
            }
            med.combine(&l1, &l2, &tmp, &mut lk);
            for (r, &idx) in recs.iter().enumerate() {
                lk[idx] += resid[r * nt + k - 1];
            }
            let p = &store[(k - 1) * n..k * n];
            for ((g, &pv), &lv) in grad.iter_mut().zip(p).zip(&lk) {
                *g += (pv * lv).f64();
            }
            if k % BLOWUP_CHECK_EVERY == 0 || k == 1 {
                check_field(&lk, shot, k - 1)?;
            }
            std::mem::swap(&mut l2, &mut l1);
            std::mem::swap(&mut l1, &mut lk);
        }
        Ok(grad)
    }

    fn assemble<T: Real>(acq: &Acquisition, shots: Vec<Vec<T>>) -> Result<DataCube<T>> {
        let data: Vec<T> = shots.into_iter().flatten().collect();
        DataCube::new(Tensor::from_vec(&acq.data_shape(), data)?)
    }

    /// Recorded data `R u` for every source.
    pub fn simulate<T: Real>(&self, model: &VelocityModel<T>, acq: &Acquisition) -> Result<DataCube<T>> {
        self.count();
        let med = self.prepare(model, acq)?;
        let shots = (0..acq.ns())
            .into_par_iter()
            .map(|s| self.forward_shot(&med, acq, s, false, None).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(acq, shots)
    }

    /// One shot with a callback receiving every new wavefield. Returns that
    /// shot's traces `[nr, nt]`.
    pub fn simulate_observed<T: Real>(
        &self,
        model: &VelocityModel<T>,
        acq: &Acquisition,
        shot: usize,
        observer: &mut dyn FnMut(&Snapshot<T>),
    ) -> Result<Tensor<T>> {
        self.count();
        if shot >= acq.ns() {
            return Err(Error::Invalid(format!("shot {shot} of {}", acq.ns())));
        }
        let med = self.prepare(model, acq)?;
        let (traces, _) = self.forward_shot(&med, acq, shot, false, Some(observer))?;
        Tensor::from_vec(&[acq.nr(), acq.nt], traces)
    }

    /// `φ = ½‖F(q) − b‖²` and its exact gradient with respect to `q`.
    pub fn misfit_and_gradient<T: Real>(
        &self,
        model: &VelocityModel<T>,
        acq: &Acquisition,
        b_obs: &DataCube<T>,
    ) -> Result<(f64, Tensor<T>)> {
        self.count();
        b_obs.check_matches(acq)?;
        let med = self.prepare(model, acq)?;
        self.check_storage(model, acq)?;
        let per_shot = (0..acq.ns())
            .into_par_iter()
            .map(|s| {
                let (traces, store) = self.forward_shot(&med, acq, s, true, None)?;
                let resid: Vec<T> = traces.iter().zip(b_obs.shot(s)).map(|(&d, &b)| d - b).collect();
                let g = self.adjoint_shot(&med, acq, s, &store, &resid)?;
                Ok((traces, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gpad = vec![0.0f64; med.lay.len()];
        let mut shots = Vec::with_capacity(per_shot.len());
        for (traces, g) in per_shot {
            for (a, b) in gpad.iter_mut().zip(&g) {
                *a += b;
            }
            shots.push(traces);
        }
        let d = Self::assemble(acq, shots)?;
        let phi = half_sq_dist(d.values().data(), b_obs.values().data());
        let grad = med.fold(&gpad);
        let grad = Tensor::from_vec(&model.grid().shape(), grad.into_iter().map(T::of).collect())?;
        grad.ensure_finite("misfit gradient")?;
        Ok((phi, grad))
    }

    /// Linearised data `J δq` around `model`.
    pub fn born<T: Real>(&self, model: &VelocityModel<T>, acq: &Acquisition, dq: &Tensor<T>) -> Result<DataCube<T>> {
        self.count();
        if dq.shape() != model.grid().shape() {
            return Err(Error::shape(format!("perturbation {:?} vs grid {:?}", dq.shape(), model.grid().shape())));
        }
        let med = self.prepare(model, acq)?;
        let dq_pad = med.extend(dq.data());
        let shots = (0..acq.ns())
            .into_par_iter()
            .map(|s| self.born_shot(&med, acq, s, &dq_pad))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(acq, shots)
    }

    fn born_shot<T: Real>(&self, med: &Medium<T>, acq: &Acquisition, shot: usize, dq: &[T]) -> Result<Vec<T>> {
        let lay = med.lay;
        let n = lay.len();
        let (nt, nr) = (acq.nt, acq.nr());
        let zero = || vec![T::zero(); n];
        let (mut up, mut u, mut un, mut p) = (zero(), zero(), zero(), zero());
        let (mut dup, mut du, mut dun) = (zero(), zero(), zero());
        let src = lay.index(acq.sources[shot][0], acq.sources[shot][1]);
        let recs: Vec<usize> = acq.receivers.iter().map(|r| lay.index(r[0], r[1])).collect();
        let mut traces = vec![T::zero(); nr * nt];
        for step in 0..nt {
            med.step(&u, &up, &mut un, &mut p);
            med.inject(src, T::of(acq.wavelet[step]), &mut un, &mut p);
            med.born_step(&du, &dup, dq, &p, &mut dun);
            for (r, &k) in recs.iter().enumerate() {
                traces[r * nt + step] = dun[k];
            }
            if step % BLOWUP_CHECK_EVERY == BLOWUP_CHECK_EVERY - 1 || step + 1 == nt {
                check_field(&dun, shot, step)?;
            }
            std::mem::swap(&mut up, &mut u);
            std::mem::swap(&mut u, &mut un);
            std::mem::swap(&mut dup, &mut du);
            std::mem::swap(&mut du, &mut dun);
        }
        Ok(traces)
    }

    /// `Jᵀ v` for a data-space vector `v`.
    pub fn born_adjoint<T: Real>(&self, model: &VelocityModel<T>, acq: &Acquisition, v: &DataCube<T>) -> Result<Tensor<T>> {
        self.count();
        v.check_matches(acq)?;
        let med = self.prepare(model, acq)?;
        self.check_storage(model, acq)?;
        let grads = (0..acq.ns())
            .into_par_iter()
            .map(|s| {
                let (_, store) = self.forward_shot(&med, acq, s, true, None)?;
                self.adjoint_shot(&med, acq, s, &store, v.shot(s))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gpad = vec![0.0f64; med.lay.len()];
        for g in grads {
            for (a, b) in gpad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let out = med.fold(&gpad);
        Tensor::from_vec(&model.grid().shape(), out.into_iter().map(T::of).collect())
    }

    /// `|⟨J δq, v⟩ − ⟨δq, Jᵀ v⟩| / |⟨J δq, v⟩|` for given vectors.
    pub fn adjoint_mismatch<T: Real>(
        &self,
        model: &VelocityModel<T>,
        acq: &Acquisition,
        dq: &Tensor<T>,
        v: &DataCube<T>,
    ) -> Result<f64> {
        let jdq = self.born(model, acq, dq)?;
        let jtv = self.born_adjoint(model, acq, v)?;
        let lhs = dot(jdq.values().data(), v.values().data());
        let rhs = dot(dq.data(), jtv.data());
        let diff = (lhs - rhs).abs();
        if diff == 0.0 {
            return Ok(0.0);
        }
        Ok(diff / lhs.abs().max(f64::MIN_POSITIVE))
    }

    /// Dot-product test with Gaussian `δq` and `v` drawn from `seed`.
    pub fn dot_product_test<T: Real>(&self, model: &VelocityModel<T>, acq: &Acquisition, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || T::of(StandardNormal.sample(&mut rng));
        let dq = Tensor::from_fn(&model.grid().shape(), |_| normal());
        let v = DataCube::new(Tensor::from_fn(&acq.data_shape(), |_| normal()))?;
        self.adjoint_mismatch(model, acq, &dq, &v)
    }
}

impl<T: Real> Medium<T> {
    /// Born update `out = A x1 + B x2 + Cq ⊙ L x1 + dq ⊙ p`.
    fn born_step(&self, x1: &[T], x2: &[T], dq: &[T], p: &[T], out: &mut [T]) {
        let w = self.lay.width;
        let nx = self.lay.px();
        let (idz2, idx2) = (self.idz2, self.idx2);
        for i in 1..=self.lay.pz() {
            let r = i * w + 1;
            let c0 = &x1[r..r + nx];
            let no = &x1[r - w..r - w + nx];
            let so = &x1[r + w..r + w + nx];
            let we = &x1[r - 1..r - 1 + nx];
            let ea = &x1[r + 1..r + 1 + nx];
            let x2r = &x2[r..r + nx];
            let a = &self.a[r..r + nx];
            let b = &self.b[r..r + nx];
            let cq = &self.cq[r..r + nx];
            let dqr = &dq[r..r + nx];
            let pr = &p[r..r + nx];
            let o = &mut out[r..r + nx];
            for j in 0..nx {
                let two = c0[j] + c0[j];
                let lap = (no[j] + so[j] - two) * idz2 + (we[j] + ea[j] - two) * idx2;
                o[j] = a[j] * c0[j] + b[j] * x2r[j] + cq[j] * lap + dqr[j] * pr[j];
            }
        }
    }
}
