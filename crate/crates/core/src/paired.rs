//! Paired model/data autoencoders with linear latent maps.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{AnyTensor, Container};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Sequential};
use crate::tensor::{Real, Tensor};
use crate::wave::{Acquisition, Grid2D};

pub const CHECKPOINT_FORMAT: &str = "pairedinv-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub model_channels: usize,
    /// Spatial extent of the model input, `[nz, nx]`.
    pub model_hw: [usize; 2],
    pub data_channels: usize,
    /// `[receivers, reduced time samples]`.
    pub data_hw: [usize; 2],
    /// Encoder widths per level, finest first; pooling between levels.
    pub enc_widths: Vec<usize>,
    /// Decoder widths per level, coarsest first; upsampling between levels.
    pub dec_widths: Vec<usize>,
    pub blocks: usize,
    pub bottleneck: usize,
    pub latent_dim: usize,
    pub h: f64,
    #[serde(default)]
    pub learned_maps: bool,
}

impl ArchConfig {
    /// Three levels with quartered widths.
    pub fn desk(grid: &Grid2D, acq: &Acquisition, time_factor: usize) -> Self {
        ArchConfig {
            model_channels: 1,
            model_hw: [grid.nz, grid.nx],
            data_channels: acq.ns(),
            data_hw: [acq.nr(), acq.nt / time_factor],
            ..Self::desk_widths()
        }
    }

    /// The desk widths and depths with placeholder input shapes.
    pub fn desk_widths() -> Self {
        ArchConfig {
            model_channels: 1,
            model_hw: [0, 0],
            data_channels: 1,
            data_hw: [0, 0],
            enc_widths: vec![8, 8, 16],
            dec_widths: vec![16, 8, 4],
            blocks: 3,
            bottleneck: 32,
            latent_dim: 64,
            h: 0.5,
            learned_maps: false,
        }
    }

    pub fn levels(&self) -> usize {
        self.enc_widths.len()
    }

    fn coarse(&self, hw: [usize; 2]) -> [usize; 2] {
        let f = 1 << (self.levels() - 1);
        [hw[0] / f, hw[1] / f]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.enc_widths.is_empty() || self.enc_widths.len() != self.dec_widths.len() {
            return bad(format!(
                "encoder and decoder need the same nonzero number of levels, got {:?} / {:?}",
                self.enc_widths, self.dec_widths
            ));
        }
        let sizes = [self.model_channels, self.data_channels, self.bottleneck, self.latent_dim];
        if sizes.contains(&0) || self.enc_widths.contains(&0) || self.dec_widths.contains(&0) {
            return bad("channel counts and latent_dim must be positive".into());
        }
        let f = 1 << (self.levels() - 1);
        for (what, hw) in [("model", self.model_hw), ("data", self.data_hw)] {
            if hw[0] % f != 0 || hw[1] % f != 0 || hw[0] == 0 || hw[1] == 0 {
                return bad(format!(
                    "{what} extent {hw:?} must be a positive multiple of {f} for {} levels",
                    self.levels()
                ));
            }
        }
        if !(self.h.is_finite() && self.h >= 0.0) {
            return bad(format!("resnet step h must be >= 0, got {}", self.h));
        }
        Ok(())
    }

    pub fn encoder_specs(&self, cin: usize, hw: [usize; 2]) -> Vec<LayerSpec> {
        let mut s = vec![LayerSpec::ConvCc {
            in_channels: cin,
            out_channels: self.enc_widths[0],
        }];
        for (l, &w) in self.enc_widths.iter().enumerate() {
            if l > 0 {
                s.push(LayerSpec::Avgpool2);
                let prev = self.enc_widths[l - 1];
                if prev != w {
                    s.push(LayerSpec::ConvCc {
                        in_channels: prev,
                        out_channels: w,
                    });
                }
            }
            for _ in 0..self.blocks {
                s.push(LayerSpec::ResnetBlock { channels: w, h: self.h });
            }
        }
        let [ch, cw] = self.coarse(hw);
        s.push(LayerSpec::ConvCc {
            in_channels: *self.enc_widths.last().expect("levels"),
            out_channels: self.bottleneck,
        });
        s.push(LayerSpec::Reshape {
            shape: vec![self.bottleneck * ch * cw],
        });
        s.push(LayerSpec::Affine {
            in_features: self.bottleneck * ch * cw,
            out_features: self.latent_dim,
        });
        s.push(LayerSpec::Norm {
            channels: self.latent_dim,
        });
        s
    }

    pub fn decoder_specs(&self, cout: usize, hw: [usize; 2]) -> Vec<LayerSpec> {
        let [ch, cw] = self.coarse(hw);
        let mut s = vec![
            LayerSpec::Affine {
                in_features: self.latent_dim,
                out_features: self.bottleneck * ch * cw,
            },
            LayerSpec::Reshape {
                shape: vec![self.bottleneck, ch, cw],
            },
            LayerSpec::ConvCc {
                in_channels: self.bottleneck,
                out_channels: self.dec_widths[0],
            },
        ];
        for (l, &w) in self.dec_widths.iter().enumerate() {
            if l > 0 {
                s.push(LayerSpec::Upsample2);
                let prev = self.dec_widths[l - 1];
                if prev != w {
                    s.push(LayerSpec::ConvCc {
                        in_channels: prev,
                        out_channels: w,
                    });
                }
            }
            for _ in 0..self.blocks {
                s.push(LayerSpec::ResnetBlock { channels: w, h: self.h });
            }
        }
        s.push(LayerSpec::ConvCc {
            in_channels: *self.dec_widths.last().expect("levels"),
            out_channels: cout,
        });
        s
    }
}

/// Fixed affine adapters between physical tensors and network tensors.
///
/// Models: `q̃ = (q − q_offset)/q_scale`. Data: `b̃ = decimate(b)/b_scale`,
/// where decimation averages groups of `time_factor` samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub q_offset: f64,
    pub q_scale: f64,
    pub b_scale: f64,
    pub time_factor: usize,
}

impl Normalizer {
    /// Maps `[c_min², c_max²]` onto `[-1, 1]`; `b_scale` is the RMS of the
    /// decimated training data.
    pub fn fit(c_min: f64, c_max: f64, time_factor: usize, data: &Tensor<f32>) -> Result<Self> {
        let mut n = Normalizer {
            q_offset: 0.5 * (c_max * c_max + c_min * c_min),
            q_scale: 0.5 * (c_max * c_max - c_min * c_min),
            b_scale: 1.0,
            time_factor,
        };
        let reduced = n.data_in(data)?;
        let rms = (reduced.sum_sq() / reduced.len() as f64).sqrt();
        if !(rms > 0.0 && rms.is_finite()) {
            return Err(Error::Invalid("training data has zero amplitude".into()));
        }
        n.b_scale = rms;
        Ok(n)
    }

    /// `[N, nz, nx]` → `[N, 1, nz, nx]`.
    pub fn model_in<T: Real>(&self, q: &Tensor<T>) -> Result<Tensor<T>> {
        let s = q.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("models must be [N, nz, nx], got {s:?}")));
        }
        let (o, k) = (T::of(self.q_offset), T::of(1.0 / self.q_scale));
        q.map(|v| (v - o) * k).reshape(&[s[0], 1, s[1], s[2]])
    }

    /// `[N, 1, nz, nx]` → `[N, nz, nx]`.
    pub fn model_out<T: Real>(&self, qn: &Tensor<T>) -> Result<Tensor<T>> {
        let s = qn.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(format!("expected [N, 1, nz, nx], got {s:?}")));
        }
        let (o, k) = (T::of(self.q_offset), T::of(self.q_scale));
        qn.map(|v| v * k + o).reshape(&[s[0], s[2], s[3]])
    }

    /// `[N, ns, nr, nt]` → `[N, ns, nr, nt/f]`.
    pub fn data_in<T: Real>(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        let s = b.shape();
        let f = self.time_factor;
        if s.len() != 4 || f == 0 || s[3] % f != 0 {
            return Err(Error::shape(format!(
                "data must be [N, ns, nr, nt] with nt divisible by {f}, got {s:?}"
            )));
        }
        let ntr = s[3] / f;
        let k = T::of(1.0 / (f as f64 * self.b_scale));
        let mut out = Vec::with_capacity(b.len() / f);
        for trace in b.data().chunks_exact(s[3]) {
            for g in trace.chunks_exact(f) {
                out.push(g.iter().copied().sum::<T>() * k);
            }
        }
        Tensor::from_vec(&[s[0], s[1], s[2], ntr], out)
    }

    /// Inverse of [`Normalizer::data_in`] up to the decimation: linear
    /// interpolation between group centres, constant beyond the ends.
    pub fn data_out<T: Real>(&self, bn: &Tensor<T>, nt: usize) -> Result<Tensor<T>> {
        let s = bn.shape();
        let f = self.time_factor;
        if s.len() != 4 || s[3] * f != nt {
            return Err(Error::shape(format!(
                "cannot expand {s:?} to {nt} samples with factor {f}"
            )));
        }
        let ntr = s[3];
        let k = T::of(self.b_scale);
        let half = (f as f64 - 1.0) / 2.0;
        let mut out = Vec::with_capacity(bn.len() * f);
        for trace in bn.data().chunks_exact(ntr) {
            for t in 0..nt {
                let pos = ((t as f64 - half) / f as f64).clamp(0.0, (ntr - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(ntr - 1);
                let a = T::of(pos - i0 as f64);
                out.push(((T::one() - a) * trace[i0] + a * trace[i1]) * k);
            }
        }
        Tensor::from_vec(&[s[0], s[1], s[2], nt], out)
    }
}

/// `M` or `M†`: identity, or a square matrix acting on `[N, d]` latents.
#[derive(Clone, Debug, PartialEq)]
pub enum LatentMap<T> {
    Identity,
    Linear(Tensor<T>),
}

impl<T: Real> LatentMap<T> {
    pub fn is_identity(&self) -> bool {
        matches!(self, LatentMap::Identity)
    }

    pub fn apply(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            LatentMap::Identity => Ok(z.clone()),
            LatentMap::Linear(m) => {
                let d = m.shape()[0];
                let (n, per) = z.batch_split();
                if per != d {
                    return Err(Error::shape(format!("latent of size {per}, map is {d}x{d}")));
                }
                let (zd, md) = (z.data(), m.data());
                let mut out = vec![T::zero(); n * d];
                for s in 0..n {
                    for i in 0..d {
                        let mut acc = T::zero();
                        for j in 0..d {
                            acc += md[i * d + j] * zd[s * d + j];
                        }
                        out[s * d + i] = acc;
                    }
                }
                Tensor::from_vec(z.shape(), out)
            }
        }
    }

    /// Gradients with respect to the input and (for a matrix) the map.
    pub fn backward(&self, z: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self {
            LatentMap::Identity => Ok((g.clone(), None)),
            LatentMap::Linear(m) => {
                let d = m.shape()[0];
                let (n, _) = z.batch_split();
                let (zd, gd, md) = (z.data(), g.data(), m.data());
                let mut gz = vec![T::zero(); n * d];
                let mut gm = vec![T::zero(); d * d];
                for s in 0..n {
                    for i in 0..d {
                        let gi = gd[s * d + i];
                        for j in 0..d {
                            gz[s * d + j] += md[i * d + j] * gi;
                            gm[i * d + j] += gi * zd[s * d + j];
                        }
                    }
                }
                Ok((Tensor::from_vec(z.shape(), gz)?, Some(Tensor::from_vec(&[d, d], gm)?)))
            }
        }
    }

    /// Spectral norm by power iteration; exactly 1 for the identity.
    pub fn spectral_norm(&self) -> f64 {
        match self {
            LatentMap::Identity => 1.0,
            LatentMap::Linear(m) => {
                let d = m.shape()[0];
                let a: Vec<f64> = m.data().iter().map(|v| v.f64()).collect();
                let mut v = vec![1.0 / (d as f64).sqrt(); d];
                let mut sigma = 0.0;
                for _ in 0..200 {
                    // w = AᵀA v
                    let av: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum()).collect();
                    let w: Vec<f64> = (0..d).map(|j| (0..d).map(|i| a[i * d + j] * av[i]).sum()).collect();
                    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if nw == 0.0 {
                        return 0.0;
                    }
                    sigma = nw.sqrt();
                    v = w.into_iter().map(|x| x / nw).collect();
                }
                sigma
            }
        }
    }
}

/// The six mappings `E_q, D_q, E_b, D_b, M, M†`.
#[derive(Clone, Debug)]
pub struct PairedModel<T> {
    pub arch: ArchConfig,
    pub norm: Normalizer,
    pub enc_model: Sequential<T>,
    pub dec_model: Sequential<T>,
    pub enc_data: Sequential<T>,
    pub dec_data: Sequential<T>,
    pub map: LatentMap<T>,
    pub map_dagger: LatentMap<T>,
}

impl<T: Real> PairedModel<T> {
    pub fn new(arch: ArchConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_model = Sequential::new(&arch.encoder_specs(arch.model_channels, arch.model_hw), &mut rng)?;
        let dec_model = Sequential::new(&arch.decoder_specs(arch.model_channels, arch.model_hw), &mut rng)?;
        let enc_data = Sequential::new(&arch.encoder_specs(arch.data_channels, arch.data_hw), &mut rng)?;
        let dec_data = Sequential::new(&arch.decoder_specs(arch.data_channels, arch.data_hw), &mut rng)?;
        let (map, map_dagger) = if arch.learned_maps {
            let d = arch.latent_dim;
            let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { T::one() } else { T::zero() });
            (LatentMap::Linear(eye.clone()), LatentMap::Linear(eye))
        } else {
            (LatentMap::Identity, LatentMap::Identity)
        };
        Ok(PairedModel {
            arch,
            norm,
            enc_model,
            dec_model,
            enc_data,
            dec_data,
            map,
            map_dagger,
        })
    }

    pub fn model_shape(&self) -> [usize; 3] {
        [self.arch.model_channels, self.arch.model_hw[0], self.arch.model_hw[1]]
    }

    pub fn data_shape(&self) -> [usize; 3] {
        [self.arch.data_channels, self.arch.data_hw[0], self.arch.data_hw[1]]
    }

    fn check_input(x: &Tensor<T>, want: [usize; 3], what: &str) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != want {
            return Err(Error::shape(format!(
                "{what} expects [N, {}, {}, {}], got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// `E_q(q̃)` on normalized models `[N, 1, nz, nx]`.
    pub fn encode_model(&self, qn: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_input(qn, self.model_shape(), "model encoder")?;
        self.enc_model.infer(qn)
    }

    pub fn decode_model(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.dec_model.infer(z)
    }

    /// `E_b(b̃)` on normalized data `[N, ns, nr, nt/f]`.
    pub fn encode_data(&self, bn: &Tensor<T>) -> Result<Tensor<T>> {
        Self::check_input(bn, self.data_shape(), "data encoder")?;
        self.enc_data.infer(bn)
    }

    pub fn decode_data(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.dec_data.infer(z)
    }

    pub fn latent_map(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.map.apply(z)
    }

    pub fn latent_map_dagger(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.map_dagger.apply(z)
    }

    /// `D_q(M† E_b(b̃))` in normalized units.
    pub fn lfe_normalized(&self, bn: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_model(&self.latent_map_dagger(&self.encode_data(bn)?)?)
    }

    /// Likelihood-free estimate from physical data `[N, ns, nr, nt]`,
    /// returned as squared velocities `[N, nz, nx]`.
    pub fn lfe(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.norm.model_out(&self.lfe_normalized(&self.norm.data_in(b)?)?)
    }

    /// `D_b(M E_q(q̃))` in normalized units.
    pub fn surrogate_normalized(&self, qn: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_data(&self.latent_map(&self.encode_model(qn)?)?)
    }

    /// Surrogate forward map on physical models `[N, nz, nx]`, returning
    /// physical data `[N, ns, nr, nt]`.
    pub fn surrogate_forward(&self, q: &Tensor<T>, nt: usize) -> Result<Tensor<T>> {
        self.norm.data_out(&self.surrogate_normalized(&self.norm.model_in(q)?)?, nt)
    }

    /// `D_q(E_q(q̃))`.
    pub fn model_roundtrip(&self, qn: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_model(&self.encode_model(qn)?)
    }

    /// `D_b(E_b(b̃))`.
    pub fn data_roundtrip(&self, bn: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode_data(&self.encode_data(bn)?)
    }

    /// Trainable tensors: the four networks, then learned maps if any.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.enc_model.params();
        p.extend(self.dec_model.params());
        p.extend(self.enc_data.params());
        p.extend(self.dec_data.params());
        for m in [&self.map, &self.map_dagger] {
            if let LatentMap::Linear(t) = m {
                p.push(t);
            }
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.enc_model.params_mut();
        p.extend(self.dec_model.params_mut());
        p.extend(self.enc_data.params_mut());
        p.extend(self.dec_data.params_mut());
        for m in [&mut self.map, &mut self.map_dagger] {
            if let LatentMap::Linear(t) = m {
                p.push(t);
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(json!({
            "format": CHECKPOINT_FORMAT,
            "arch": self.arch,
            "norm": self.norm,
            "dtype": T::DTYPE,
        }));
        for (prefix, net) in self.nets() {
            for (name, t) in net.named_tensors(prefix) {
                c.insert(name, AnyTensor::of(t));
            }
        }
        for (name, m) in [("map", &self.map), ("map_dagger", &self.map_dagger)] {
            if let LatentMap::Linear(t) = m {
                c.insert(format!("{name}.weight"), AnyTensor::of(t));
            }
        }
        Ok(c)
    }

    fn nets(&self) -> [(&'static str, &Sequential<T>); 4] {
        [
            ("enc_model", &self.enc_model),
            ("dec_model", &self.dec_model),
            ("enc_data", &self.enc_data),
            ("dec_data", &self.dec_data),
        ]
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let format = c.meta.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                offset: 0,
                msg: format!("not a checkpoint (format '{format}')"),
            });
        }
        let arch: ArchConfig = serde_json::from_value(c.meta["arch"].clone())?;
        let norm: Normalizer = serde_json::from_value(c.meta["norm"].clone())?;
        let mut m = PairedModel::new(arch, norm, 0)?;
        let expected = c.tensors.len();
        let mut used = 0;
        for (prefix, net) in [
            ("enc_model", &mut m.enc_model),
            ("dec_model", &mut m.dec_model),
            ("enc_data", &mut m.enc_data),
            ("dec_data", &mut m.dec_data),
        ] {
            for (name, t) in net.named_tensors_mut(prefix) {
                *t = load_tensor(c, &name, t.shape())?;
                used += 1;
            }
        }
        for (name, map) in [("map", &mut m.map), ("map_dagger", &mut m.map_dagger)] {
            if let LatentMap::Linear(t) = map {
                *t = load_tensor(c, &format!("{name}.weight"), t.shape())?;
                used += 1;
            }
        }
        if used != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!("checkpoint holds {expected} tensors, architecture uses {used}"),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> Result<PairedModel<U>> {
        PairedModel::from_container(&self.to_container()?)
    }
}

fn load_tensor<T: Real>(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = c.get(name)?;
    if t.shape() != shape {
        return Err(Error::Format {
            offset: 0,
            msg: format!("tensor '{name}' has shape {:?}, expected {shape:?}", t.shape()),
        });
    }
    Ok(t.to::<T>())
}
