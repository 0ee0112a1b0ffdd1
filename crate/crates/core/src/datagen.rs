//! Synthetic layered velocity models and paired data sets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::wave::{Acquisition, DataCube, Grid2D, VelocityModel, WaveSolver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    FlatLayers,
    CurvedLayers,
    FaultedLayers,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelStyle {
    pub family: Family,
    /// Inclusive range of layer counts.
    pub layers: [usize; 2],
    pub c_min: f64,
    pub c_max: f64,
    /// Largest interface undulation amplitude, in cells (curved family).
    #[serde(default = "default_curvature")]
    pub curvature: f64,
    /// Largest vertical offset across the fault, in cells (faulted family).
    #[serde(default = "default_throw")]
    pub fault_throw: f64,
}

fn default_curvature() -> f64 {
    6.0
}

fn default_throw() -> f64 {
    10.0
}

impl ModelStyle {
    pub fn new(family: Family) -> Self {
        ModelStyle {
            family,
            layers: [3, 6],
            c_min: 1500.0,
            c_max: 4000.0,
            curvature: default_curvature(),
            fault_throw: default_throw(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_min > 0.0 && self.c_min < self.c_max) {
            return Err(Error::Invalid(format!(
                "style needs 0 < c_min < c_max, got [{}, {}]",
                self.c_min, self.c_max
            )));
        }
        if self.layers[0] < 1 || self.layers[0] > self.layers[1] {
            return Err(Error::Invalid(format!("bad layer range {:?}", self.layers)));
        }
        if !(self.curvature >= 0.0 && self.fault_throw >= 0.0) {
            return Err(Error::Invalid("curvature and fault throw must be >= 0".into()));
        }
        Ok(())
    }
}

/// Draw one model; velocities are piecewise constant between interfaces.
pub fn sample_model<T: Real>(style: &ModelStyle, grid: &Grid2D, rng: &mut impl Rng) -> Result<VelocityModel<T>> {
    style.validate()?;
    let (nz, nx) = (grid.nz, grid.nx);
    let k = rng.gen_range(style.layers[0]..=style.layers[1]);
    let mut depths: Vec<f64> = (1..k).map(|_| rng.gen_range(2.0..nz as f64 - 2.0)).collect();
    depths.sort_by(f64::total_cmp);
    let mut vel: Vec<f64> = (0..k).map(|_| rng.gen_range(style.c_min..=style.c_max)).collect();
    vel.sort_by(f64::total_cmp);

    // interface displacement as a function of (z, x), in cells
    let shift: Box<dyn Fn(f64, f64) -> f64> = match style.family {
        Family::FlatLayers => Box::new(|_, _| 0.0),
        Family::CurvedLayers => {
            let amp = style.curvature * rng.gen_range(0.7..1.0);
            let wavelength = nx as f64 * rng.gen_range(0.6..1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            Box::new(move |_, x| amp * (std::f64::consts::TAU * x / wavelength + phase).sin())
        }
        Family::FaultedLayers => {
            let throw = style.fault_throw * rng.gen_range(0.5..1.0) * if rng.gen() { 1.0 } else { -1.0 };
            let x0 = nx as f64 * rng.gen_range(0.3..0.7);
            let slope = rng.gen_range(-0.6..0.6);
            let dip = rng.gen_range(-0.1..0.1);
            Box::new(move |z, x| {
                let fault_x = x0 + slope * (z - nz as f64 / 2.0);
                dip * (x - nx as f64 / 2.0) + if x > fault_x { throw } else { 0.0 }
            })
        }
    };

    let mut q = Vec::with_capacity(nz * nx);
    for iz in 0..nz {
        let z = iz as f64 + 0.5;
        for ix in 0..nx {
            let s = shift(z, ix as f64 + 0.5);
            let layer = depths.iter().filter(|&&d| d + s <= z).count();
            let c = vel[layer];
            q.push(T::of(c * c));
        }
    }
    VelocityModel::new(*grid, Tensor::from_vec(&[nz, nx], q)?)
}

/// Ratio of lateral to vertical total variation of the velocity field.
///
/// Zero for laterally invariant models; roughly the mean interface slope
/// otherwise. Returns 0 for a constant model.
pub fn lateral_index<T: Real>(model: &VelocityModel<T>) -> f64 {
    let g = model.grid();
    let c = model.velocity();
    let v = c.data();
    let (mut lat, mut vert) = (0.0f64, 0.0f64);
    for iz in 0..g.nz {
        for ix in 0..g.nx {
            let k = iz * g.nx + ix;
            if ix + 1 < g.nx {
                lat += (v[k + 1] - v[k]).abs().f64();
            }
            if iz + 1 < g.nz {
                vert += (v[k + g.nx] - v[k]).abs().f64();
            }
        }
    }
    if vert == 0.0 {
        0.0
    } else {
        lat / vert
    }
}

/// `b = F(q) + ε` with `ε ~ N(0, σ²)` i.i.d.
pub fn synthesize_pair<T: Real>(
    model: &VelocityModel<T>,
    acq: &Acquisition,
    sigma: f64,
    rng: &mut impl Rng,
    solver: &WaveSolver,
) -> Result<DataCube<T>> {
    let mut b = solver.simulate(model, acq)?;
    add_noise(&mut b, sigma, rng)?;
    Ok(b)
}

fn add_noise<T: Real>(b: &mut DataCube<T>, sigma: f64, rng: &mut impl Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(format!("noise sigma {sigma}: {e}")))?;
    for v in b.values_mut().data_mut() {
        *v += T::of(normal.sample(rng));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// σ as a fraction of the mean absolute clean amplitude of this set.
    Relative(f64),
    Absolute(f64),
}

/// Paired models (`q`) and noisy data, stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub grid: Grid2D,
    pub acquisition: Acquisition,
    pub style: ModelStyle,
    pub split: Split,
    pub seed: u64,
    pub noise_sigma: f64,
    /// `[N, nz, nx]` squared velocities.
    pub models: Tensor<f32>,
    /// `[N, ns, nr, nt]`.
    pub data: Tensor<f32>,
}

/// Deterministic generator for pair `i`.
pub fn pair_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    n: usize,
    style: &ModelStyle,
    grid: &Grid2D,
    acq: &Acquisition,
    noise: Noise,
    seed: u64,
    split: Split,
    solver: &WaveSolver,
) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be >= 1".into()));
    }
    style.validate()?;
    acq.validate(grid)?;
    let pairs = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = pair_rng(seed, i);
            let m = sample_model::<f32>(style, grid, &mut rng)?;
            let d = solver.simulate(&m, acq)?;
            Ok((m, d, rng))
        })
        .collect::<Result<Vec<_>>>()?;

    let sigma = match noise {
        Noise::Absolute(s) => s,
        Noise::Relative(f) => {
            let (sum, count) = pairs.iter().fold((0.0f64, 0usize), |(s, c), (_, d, _)| {
                let t = d.values().data();
                (s + t.iter().map(|v| v.abs() as f64).sum::<f64>(), c + t.len())
            });
            f * sum / count as f64
        }
    };
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut models = Vec::with_capacity(n * grid.cells());
    let mut data = Vec::with_capacity(n * acq.data_shape().iter().product::<usize>());
    for (m, mut d, mut rng) in pairs {
        add_noise(&mut d, sigma, &mut rng)?;
        models.extend_from_slice(m.qsq().data());
        data.extend_from_slice(d.values().data());
    }
    let [ns, nr, nt] = acq.data_shape();
    Ok(PairedDataset {
        grid: *grid,
        acquisition: acq.clone(),
        style: style.clone(),
        split,
        seed,
        noise_sigma: sigma,
        models: Tensor::from_vec(&[n, grid.nz, grid.nx], models)?,
        data: Tensor::from_vec(&[n, ns, nr, nt], data)?,
    })
}

pub const SHARD_SIZE: usize = 256;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub split: Split,
    pub n: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub grid: Grid2D,
    pub acquisition: Acquisition,
    pub style: ModelStyle,
    pub shards: Vec<String>,
}

pub const MANIFEST_FORMAT: &str = "pairedinv-dataset-1";

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.models.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn model(&self, i: usize) -> Result<VelocityModel<f32>> {
        VelocityModel::new(
            self.grid,
            Tensor::from_vec(&self.grid.shape(), self.models.batch_item(i).to_vec())?,
        )
    }

    pub fn data(&self, i: usize) -> Result<DataCube<f32>> {
        DataCube::new(Tensor::from_vec(
            &self.acquisition.data_shape(),
            self.data.batch_item(i).to_vec(),
        )?)
    }

    /// The first `n` pairs.
    pub fn head(&self, n: usize) -> PairedDataset {
        let n = n.min(self.len());
        PairedDataset {
            models: self.models.slice_batch(0, n),
            data: self.data.slice_batch(0, n),
            ..self.clone()
        }
    }

    /// Shards of at most [`SHARD_SIZE`] pairs plus `<name>.manifest.json` in `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut shards = Vec::new();
        for (k, start) in (0..self.len()).step_by(SHARD_SIZE).enumerate() {
            let count = SHARD_SIZE.min(self.len() - start);
            let mut c = Container::new(json!({"shard": k, "start": start, "count": count}));
            c.insert("models", self.models.slice_batch(start, count));
            c.insert("data", self.data.slice_batch(start, count));
            let file = format!("{name}-{k:03}.pairinv");
            c.save(dir.join(&file))?;
            shards.push(file);
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            split: self.split,
            n: self.len(),
            seed: self.seed,
            noise_sigma: self.noise_sigma,
            grid: self.grid,
            acquisition: self.acquisition.clone(),
            style: self.style.clone(),
            shards,
        };
        let path = dir.join(format!("{name}.manifest.json"));
        let text = serde_json::to_string_pretty(&serde_json::to_value(&manifest)?)?;
        std::fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<PairedDataset> {
        let path = manifest_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                offset: 0,
                msg: format!("{}: unknown manifest format '{}'", path.display(), m.format),
            });
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let (mut models, mut data) = (Vec::new(), Vec::new());
        for s in &m.shards {
            let c = Container::load(dir.join(s))?;
            models.extend(c.get("models")?.to::<f32>().into_vec());
            data.extend(c.get("data")?.to::<f32>().into_vec());
        }
        let [ns, nr, nt] = m.acquisition.data_shape();
        Ok(PairedDataset {
            models: Tensor::from_vec(&[m.n, m.grid.nz, m.grid.nx], models)?,
            data: Tensor::from_vec(&[m.n, ns, nr, nt], data)?,
            grid: m.grid,
            acquisition: m.acquisition,
            style: m.style,
            split: m.split,
            seed: m.seed,
            noise_sigma: m.noise_sigma,
        })
    }
}
