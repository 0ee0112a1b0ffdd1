//! JSON run configuration shared by the command line and the examples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{Family, ModelStyle, Noise};
use crate::diagnostics::{DEFAULT_BINS, DEFAULT_OOD_THRESHOLD, DEFAULT_SMOOTH_SIGMA};
use crate::inversion::{InversionConfig, Method, Start};
use crate::paired::ArchConfig;
use crate::training::{LossConfig, TrainConfig};
use crate::wave::{default_t0, ricker, stable_dt, Acquisition, Grid2D};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub grid: Grid2D,
    pub acquisition: AcquisitionConfig,
    pub style: StyleConfig,
    pub train: TrainSection,
    pub inversion: InversionSection,
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub sources: usize,
    pub receivers: usize,
    /// Row index of the source and receiver line.
    #[serde(default = "one")]
    pub depth: usize,
    pub nt: usize,
    pub peak_freq: f64,
    /// Wavelet delay in seconds; defaults to `1.5 / peak_freq`.
    #[serde(default)]
    pub t0: Option<f64>,
    /// Time step as a fraction of the stability limit at `style.train.c_max`.
    #[serde(default = "cfl_fraction")]
    pub cfl_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleConfig {
    pub train: ModelStyle,
    /// Held-out family for the OOD experiment.
    pub ood: ModelStyle,
    /// Noise σ relative to the mean absolute clean amplitude of each set.
    #[serde(default = "noise")]
    pub noise_relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default = "time_factor")]
    pub time_factor: usize,
    pub epochs: usize,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default = "train_lr")]
    pub lr: f64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Overrides the default three-level architecture.
    #[serde(default)]
    pub arch: Option<ArchOverride>,
}

/// Architecture fields that do not follow from the grid and acquisition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchOverride {
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
    pub blocks: usize,
    pub bottleneck: usize,
    pub latent_dim: usize,
    #[serde(default = "half")]
    pub h: f64,
    #[serde(default)]
    pub learned_maps: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSection {
    pub n_test: usize,
    /// Test pairs used by `suite`; all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite_samples: Option<usize>,
    pub iters: usize,
    #[serde(default = "inv_lr")]
    pub lr: f64,
    /// Tikhonov weight of the warm-started latent inversion in the suite.
    #[serde(default = "one_f")]
    pub alpha_warm: f64,
    /// The single job run by `invert`.
    #[serde(default = "default_job")]
    pub job: InversionJob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionJob {
    pub method: Method,
    pub start: Start,
    #[serde(default)]
    pub alpha: f64,
    /// Index into the test set.
    #[serde(default)]
    pub sample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub n_ood: usize,
    #[serde(default = "bins")]
    pub bins: usize,
    #[serde(default = "sigma")]
    pub smooth_sigma: f64,
    #[serde(default = "threshold")]
    pub threshold: f64,
    #[serde(default = "pairs")]
    pub pair_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Relative paths are taken from the directory of the config file.
    #[serde(default = "data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "out_dir")]
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: data_dir(),
            out_dir: out_dir(),
        }
    }
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn cfl_fraction() -> f64 {
    0.8
}
fn noise() -> f64 {
    0.01
}
fn time_factor() -> usize {
    4
}
fn batch() -> usize {
    16
}
fn train_lr() -> f64 {
    1e-3
}
fn inv_lr() -> f64 {
    1e-2
}
fn bins() -> usize {
    DEFAULT_BINS
}
fn sigma() -> f64 {
    DEFAULT_SMOOTH_SIGMA
}
fn threshold() -> f64 {
    DEFAULT_OOD_THRESHOLD
}
fn pairs() -> usize {
    2000
}
fn data_dir() -> PathBuf {
    "data".into()
}
fn out_dir() -> PathBuf {
    "out".into()
}
fn default_job() -> InversionJob {
    InversionJob {
        method: Method::Lsi,
        start: Start::Warm,
        alpha: 1.0,
        sample: 0,
    }
}

/// Dataset seeds are offsets of the run seed so the four sets never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetKind {
    Train,
    Val,
    Test,
    Ood,
}

impl SetKind {
    pub const ALL: [SetKind; 4] = [SetKind::Train, SetKind::Val, SetKind::Test, SetKind::Ood];

    pub fn name(self) -> &'static str {
        match self {
            SetKind::Train => "train",
            SetKind::Val => "val",
            SetKind::Test => "test",
            SetKind::Ood => "ood",
        }
    }

    fn offset(self) -> u64 {
        match self {
            SetKind::Train => 1,
            SetKind::Val => 2,
            SetKind::Test => 3,
            SetKind::Ood => 4,
        }
    }
}

impl RunConfig {
    /// 64×64 grid, six shots, 32 receivers, 512 samples; flat layers for
    /// training and curved layers held out.
    pub fn desk() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            seed: 0,
            grid: Grid2D::new(64, 64, 10.0, 10.0).expect("valid grid"),
            acquisition: AcquisitionConfig {
                sources: 6,
                receivers: 32,
                depth: 1,
                nt: 512,
                peak_freq: 10.0,
                t0: Some(0.15),
                cfl_fraction: cfl_fraction(),
            },
            style: StyleConfig {
                train: ModelStyle::new(Family::FlatLayers),
                ood: ModelStyle::new(Family::CurvedLayers),
                noise_relative: noise(),
            },
            train: TrainSection {
                n_train: 512,
                n_val: 128,
                time_factor: time_factor(),
                epochs: 25,
                batch_size: batch(),
                lr: train_lr(),
                loss: LossConfig::default(),
                arch: None,
            },
            inversion: InversionSection {
                n_test: 100,
                suite_samples: Some(50),
                iters: 30,
                lr: inv_lr(),
                alpha_warm: 1.0,
                job: default_job(),
            },
            diagnostics: DiagnosticsSection {
                n_ood: 100,
                bins: bins(),
                smooth_sigma: sigma(),
                threshold: threshold(),
                pair_samples: pairs(),
            },
            paths: PathsSection::default(),
        }
    }

    /// A 16×16 problem that runs every subcommand in seconds.
    pub fn tiny() -> Self {
        let mut c = RunConfig::desk();
        c.grid = Grid2D::new(16, 16, 10.0, 10.0).expect("valid grid");
        c.acquisition = AcquisitionConfig {
            sources: 2,
            receivers: 8,
            depth: 1,
            nt: 128,
            peak_freq: 20.0,
            t0: Some(0.06),
            cfl_fraction: cfl_fraction(),
        };
        c.train = TrainSection {
            n_train: 32,
            n_val: 32,
            epochs: 2,
            batch_size: 8,
            arch: Some(ArchOverride {
                enc_widths: vec![2, 2],
                dec_widths: vec![2, 2],
                blocks: 1,
                bottleneck: 2,
                latent_dim: 8,
                h: 0.5,
                learned_maps: false,
            }),
            ..c.train
        };
        c.inversion.n_test = 32;
        c.inversion.suite_samples = None;
        c.inversion.iters = 3;
        c.diagnostics.n_ood = 32;
        c.diagnostics.pair_samples = 200;
        c
    }

    /// Reads, checks the schema version, validates and resolves paths against
    /// the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut c = Self::from_json(&text).map_err(|e| match e {
            Error::Json(e) => Error::Config(format!("{}: {e}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        c.paths.resolve(base);
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("config_version").and_then(|x| x.as_u64()) {
            Some(n) if n == CONFIG_VERSION as u64 => {}
            other => {
                return Err(Error::Config(format!(
                    "config_version must be {CONFIG_VERSION}, found {other:?}"
                )))
            }
        }
        let c: RunConfig = serde_json::from_value(v)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.style.train.validate()?;
        self.style.ood.validate()?;
        if !(self.style.noise_relative >= 0.0 && self.style.noise_relative.is_finite()) {
            return Err(Error::Config("noise_relative must be >= 0".into()));
        }
        let a = &self.acquisition;
        if a.sources == 0 || a.receivers == 0 || a.nt == 0 {
            return Err(Error::Config("acquisition needs sources, receivers and nt >= 1".into()));
        }
        if !(a.cfl_fraction > 0.0 && a.cfl_fraction <= 1.0) {
            return Err(Error::Config(format!("cfl_fraction must be in (0, 1], got {}", a.cfl_fraction)));
        }
        let t = &self.train;
        if t.n_train < 2 || t.n_val < 2 {
            return Err(Error::Config("n_train and n_val must be at least 2".into()));
        }
        if t.time_factor == 0 || a.nt % t.time_factor != 0 {
            return Err(Error::Config(format!(
                "time_factor {} must divide nt {}",
                t.time_factor, a.nt
            )));
        }
        self.train_config().validate()?;
        self.arch().validate()?;
        if self.inversion.n_test == 0 || self.diagnostics.n_ood == 0 || self.inversion.suite_samples == Some(0) {
            return Err(Error::Config("n_test, n_ood and suite_samples must be at least 1".into()));
        }
        for c in self.suite_configs() {
            c.validate()?;
        }
        self.job_config().validate()?;
        if self.diagnostics.bins < 2 || !(0.0..1.0).contains(&self.diagnostics.threshold) {
            return Err(Error::Config("diagnostics needs bins >= 2 and threshold in [0, 1)".into()));
        }
        self.acquisition()?;
        Ok(())
    }

    pub fn c_range(&self) -> (f64, f64) {
        (self.style.train.c_min, self.style.train.c_max)
    }

    pub fn acquisition(&self) -> Result<Acquisition> {
        let a = &self.acquisition;
        let c_max = self.style.train.c_max.max(self.style.ood.c_max);
        let dt = stable_dt(&self.grid, c_max, a.cfl_fraction);
        let w = ricker(a.peak_freq, a.nt, dt, a.t0.unwrap_or_else(|| default_t0(a.peak_freq)))?;
        Acquisition::line(&self.grid, a.sources, a.receivers, a.depth, a.nt, dt, w)
    }

    pub fn noise(&self) -> Noise {
        Noise::Relative(self.style.noise_relative)
    }

    pub fn set_seed(&self, kind: SetKind) -> u64 {
        self.seed.wrapping_mul(16).wrapping_add(kind.offset())
    }

    pub fn set_size(&self, kind: SetKind) -> usize {
        match kind {
            SetKind::Train => self.train.n_train,
            SetKind::Val => self.train.n_val,
            SetKind::Test => self.inversion.n_test,
            SetKind::Ood => self.diagnostics.n_ood,
        }
    }

    pub fn set_style(&self, kind: SetKind) -> &ModelStyle {
        match kind {
            SetKind::Ood => &self.style.ood,
            _ => &self.style.train,
        }
    }

    pub fn manifest_path(&self, kind: SetKind) -> PathBuf {
        self.paths.data_dir.join(format!("{}.manifest.json", kind.name()))
    }

    pub fn arch(&self) -> ArchConfig {
        let grid = &self.grid;
        let a = &self.acquisition;
        let tf = self.train.time_factor.max(1);
        match &self.train.arch {
            None => ArchConfig {
                model_channels: 1,
                model_hw: [grid.nz, grid.nx],
                data_channels: a.sources,
                data_hw: [a.receivers, a.nt / tf],
                ..ArchConfig::desk_widths()
            },
            Some(o) => ArchConfig {
                model_channels: 1,
                model_hw: [grid.nz, grid.nx],
                data_channels: a.sources,
                data_hw: [a.receivers, a.nt / tf],
                enc_widths: o.enc_widths.clone(),
                dec_widths: o.dec_widths.clone(),
                blocks: o.blocks,
                bottleneck: o.bottleneck,
                latent_dim: o.latent_dim,
                h: o.h,
                learned_maps: o.learned_maps,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            loss: self.train.loss,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn inversion_config(&self, method: Method, start: Start, alpha: f64) -> InversionConfig {
        let (c_min, c_max) = self.c_range();
        InversionConfig {
            lr: self.inversion.lr,
            c_min,
            c_max,
            ..InversionConfig::new(method, start, alpha, self.inversion.iters)
        }
    }

    /// BI basic, BI warm, LSI basic (α = 0), LSI warm (α = `alpha_warm`).
    pub fn suite_configs(&self) -> [InversionConfig; 4] {
        [
            self.inversion_config(Method::Bi, Start::Basic, 0.0),
            self.inversion_config(Method::Bi, Start::Warm, 0.0),
            self.inversion_config(Method::Lsi, Start::Basic, 0.0),
            self.inversion_config(Method::Lsi, Start::Warm, self.inversion.alpha_warm),
        ]
    }

    pub fn suite_samples(&self) -> usize {
        self.inversion.suite_samples.unwrap_or(self.inversion.n_test).min(self.inversion.n_test)
    }

    pub fn job_config(&self) -> InversionConfig {
        let j = &self.inversion.job;
        self.inversion_config(j.method, j.start, j.alpha)
    }
}

impl PathsSection {
    pub fn resolve(&mut self, base: &Path) {
        for p in [&mut self.data_dir, &mut self.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
