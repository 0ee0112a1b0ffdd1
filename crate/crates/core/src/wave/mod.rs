//! 2D constant-density acoustic modelling on a regular grid.
//!
//! The medium is described by `q = c²`, the squared velocity, so the
//! simulated equation is `∇²u − (1/q) ∂ₜₜu = s`.

mod solver;

pub use solver::{FieldLayout, Snapshot, SpongeConfig, WaveSolver};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Stability limit of `c_max·dt/h` for second-order leapfrog in 2D.
pub const CFL_LIMIT: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid2D {
    pub nz: usize,
    pub nx: usize,
    pub dz: f64,
    pub dx: f64,
}

impl Grid2D {
    pub fn new(nz: usize, nx: usize, dz: f64, dx: f64) -> Result<Self> {
        let g = Grid2D { nz, nx, dz, dx };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nz < 16 || self.nx < 16 {
            return Err(Error::Invalid(format!(
                "grid must be at least 16x16, got {}x{}",
                self.nz, self.nx
            )));
        }
        if !(self.dz > 0.0 && self.dx > 0.0) {
            return Err(Error::Invalid(format!(
                "grid spacing must be positive, got dz={} dx={}",
                self.dz, self.dx
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.nz * self.nx
    }

    pub fn h_min(&self) -> f64 {
        self.dz.min(self.dx)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.nz, self.nx]
    }
}

/// Squared velocity `q = c²` on a grid, in m²/s².
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityModel<T> {
    grid: Grid2D,
    qsq: Tensor<T>,
}

impl<T: Real> VelocityModel<T> {
    pub fn new(grid: Grid2D, qsq: Tensor<T>) -> Result<Self> {
        grid.validate()?;
        if qsq.shape() != grid.shape() {
            return Err(Error::shape(format!(
                "model field {:?} does not match grid {:?}",
                qsq.shape(),
                grid.shape()
            )));
        }
        if let Some(v) = qsq.data().iter().find(|v| !(v.is_finite() && **v > T::zero())) {
            return Err(Error::Invalid(format!(
                "squared velocity must be finite and positive, found {v}"
            )));
        }
        Ok(VelocityModel { grid, qsq })
    }

    /// Build from velocities in m/s.
    pub fn from_velocity(grid: Grid2D, c: &Tensor<T>) -> Result<Self> {
        Self::new(grid, c.map(|v| v * v))
    }

    pub fn homogeneous(grid: Grid2D, c: f64) -> Result<Self> {
        Self::new(grid, Tensor::full(&grid.shape(), T::of(c * c)))
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn qsq(&self) -> &Tensor<T> {
        &self.qsq
    }

    pub fn into_qsq(self) -> Tensor<T> {
        self.qsq
    }

    /// Velocity field `c = √q`.
    pub fn velocity(&self) -> Tensor<T> {
        q_to_c(&self.qsq)
    }

    pub fn c_max(&self) -> f64 {
        self.qsq
            .data()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.f64()))
            .sqrt()
    }

    /// Checks `c_min² ≤ q ≤ c_max²` everywhere.
    pub fn check_bounds(&self, c_min: f64, c_max: f64) -> Result<()> {
        let (lo, hi) = (c_min * c_min, c_max * c_max);
        // allow one ulp-ish of slack from the f32 round trip of c²
        let slack = 1e-6 * hi;
        match self
            .qsq
            .data()
            .iter()
            .position(|v| v.f64() < lo - slack || v.f64() > hi + slack)
        {
            None => Ok(()),
            Some(i) => Err(Error::Invalid(format!(
                "velocity {} m/s at cell {} outside [{c_min}, {c_max}]",
                self.qsq.data()[i].f64().sqrt(),
                i
            ))),
        }
    }
}

/// `c = √max(q, 0)` element-wise.
pub fn q_to_c<T: Real>(q: &Tensor<T>) -> Tensor<T> {
    q.map(|v| v.max(T::zero()).sqrt())
}

/// `‖c(q̂) − c(q)‖ / ‖c(q)‖` with `c = √max(q, 0)`, on flat squared-velocity slices.
pub fn relative_velocity_error<T: Real>(q_hat: &[T], q: &[T]) -> f64 {
    assert_eq!(q_hat.len(), q.len(), "model sizes differ");
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in q_hat.iter().zip(q) {
        let (ca, cb) = (a.f64().max(0.0).sqrt(), b.f64().max(0.0).sqrt());
        num += (ca - cb) * (ca - cb);
        den += cb * cb;
    }
    (num / den).sqrt()
}

/// Source and receiver layout plus the time axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acquisition {
    /// `[iz, ix]` grid indices.
    pub sources: Vec<[usize; 2]>,
    pub receivers: Vec<[usize; 2]>,
    pub nt: usize,
    pub dt: f64,
    pub wavelet: Vec<f64>,
}

impl Acquisition {
    /// Sources and receivers evenly spread along row `depth`.
    pub fn line(
        grid: &Grid2D,
        n_sources: usize,
        n_receivers: usize,
        depth: usize,
        nt: usize,
        dt: f64,
        wavelet: Vec<f64>,
    ) -> Result<Self> {
        let spread = |n: usize| -> Vec<[usize; 2]> {
            (0..n).map(|k| [depth, (2 * k + 1) * grid.nx / (2 * n)]).collect()
        };
        let acq = Acquisition {
            sources: spread(n_sources),
            receivers: spread(n_receivers),
            nt,
            dt,
            wavelet,
        };
        acq.validate(grid)?;
        Ok(acq)
    }

    pub fn validate(&self, grid: &Grid2D) -> Result<()> {
        if self.sources.is_empty() || self.receivers.is_empty() || self.nt == 0 {
            return Err(Error::Invalid(
                "acquisition needs at least one source, receiver and time step".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.wavelet.len() != self.nt {
            return Err(Error::Invalid(format!(
                "wavelet has {} samples but nt = {}",
                self.wavelet.len(),
                self.nt
            )));
        }
        if self.wavelet.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("source wavelet".into()));
        }
        for p in self.sources.iter().chain(&self.receivers) {
            if p[0] >= grid.nz || p[1] >= grid.nx {
                return Err(Error::Invalid(format!(
                    "position {:?} outside {}x{} grid",
                    p, grid.nz, grid.nx
                )));
            }
        }
        Ok(())
    }

    pub fn ns(&self) -> usize {
        self.sources.len()
    }

    pub fn nr(&self) -> usize {
        self.receivers.len()
    }

    pub fn data_shape(&self) -> [usize; 3] {
        [self.ns(), self.nr(), self.nt]
    }

    pub fn with_wavelet(&self, wavelet: Vec<f64>) -> Acquisition {
        Acquisition {
            wavelet,
            ..self.clone()
        }
    }
}

/// Recorded traces, shape `[sources, receivers, time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataCube<T>(Tensor<T>);

impl<T: Real> DataCube<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::shape(format!(
                "data cube must be 3-D, got {:?}",
                values.shape()
            )));
        }
        values.ensure_finite("data cube")?;
        Ok(DataCube(values))
    }

    pub fn zeros(acq: &Acquisition) -> Self {
        DataCube(Tensor::zeros(&acq.data_shape()))
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Tensor<T> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    /// Traces of one source, `[receivers, time]` flattened.
    pub fn shot(&self, s: usize) -> &[T] {
        self.0.batch_item(s)
    }

    pub fn check_matches(&self, acq: &Acquisition) -> Result<()> {
        if self.shape() != acq.data_shape() {
            return Err(Error::shape(format!(
                "data cube {:?} does not match acquisition {:?}",
                self.shape(),
                acq.data_shape()
            )));
        }
        Ok(())
    }
}

/// Ricker wavelet with peak frequency `f_peak` centred at `t0`, sampled at `k·dt`.
pub fn ricker(f_peak: f64, nt: usize, dt: f64, t0: f64) -> Result<Vec<f64>> {
    if !(f_peak > 0.0 && t0 >= 0.0 && dt > 0.0) {
        return Err(Error::Invalid(format!(
            "ricker needs f_peak > 0, t0 >= 0, dt > 0 (got {f_peak}, {t0}, {dt})"
        )));
    }
    Ok((0..nt)
        .map(|k| {
            let a = (PI * f_peak * (k as f64 * dt - t0)).powi(2);
            (1.0 - 2.0 * a) * (-a).exp()
        })
        .collect())
}

/// Delay that makes the Ricker wavelet start close to zero.
pub fn default_t0(f_peak: f64) -> f64 {
    1.5 / f_peak
}

pub fn cfl_ratio(c_max: f64, dt: f64, grid: &Grid2D) -> f64 {
    c_max * dt / grid.h_min()
}

/// Returns the ratio `c_max·dt/h_min` when it is within the stability bound.
pub fn cfl_check<T: Real>(model: &VelocityModel<T>, dt: f64) -> Result<f64> {
    check_cfl(model.c_max(), dt, model.grid())
}

pub fn check_cfl(c_max: f64, dt: f64, grid: &Grid2D) -> Result<f64> {
    let ratio = cfl_ratio(c_max, dt, grid);
    if ratio <= CFL_LIMIT {
        Ok(ratio)
    } else {
        Err(Error::Cfl {
            ratio,
            limit: CFL_LIMIT,
        })
    }
}

/// Time step at `fraction` of the stability limit for velocities up to `c_max`.
pub fn stable_dt(grid: &Grid2D, c_max: f64, fraction: f64) -> f64 {
    fraction * CFL_LIMIT * grid.h_min() / c_max
}
