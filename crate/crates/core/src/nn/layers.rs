//! Layers with explicit forward caches and hand-written backward passes.
//!
//! All spatial tensors are laid out `[batch, channels, height, width]`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.9;

/// How normalization layers behave and whether a backward pass is allowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated; cache retained.
    Train,
    /// Running statistics; no cache, backward is rejected.
    Infer,
    /// Running statistics with a cache, for gradients through a trained net.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv3x3 { channels: usize },
    ConvCc { in_channels: usize, out_channels: usize },
    Silu,
    Norm { channels: usize },
    Avgpool2,
    Upsample2,
    Affine { in_features: usize, out_features: usize },
    Reshape { shape: Vec<usize> },
    ResnetBlock { channels: usize, h: f64 },
}

/// 3×3 convolution with zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Affine<T> {
    pub fin: usize,
    pub fout: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `y = x − h·K1(silu(norm(K2 x)))`.
#[derive(Clone, Debug)]
pub struct ResnetBlock<T> {
    pub h: T,
    pub k2: Conv<T>,
    pub norm: BatchNorm<T>,
    pub k1: Conv<T>,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Silu,
    Norm(BatchNorm<T>),
    AvgPool2,
    Upsample2,
    Affine(Affine<T>),
    Reshape(Vec<usize>),
    Resnet(ResnetBlock<T>),
}

#[derive(Clone, Debug)]
pub struct Cache<T> {
    mode: Mode,
    kind: CacheKind<T>,
}

#[derive(Clone, Debug)]
enum CacheKind<T> {
    None,
    Input(Tensor<T>),
    Shape(Vec<usize>),
    Norm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: Option<(Vec<T>, Vec<T>)>,
    },
    Resnet(Box<[Cache<T>; 4]>),
}

impl<T> Cache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let a = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-a..a)))
}

fn dims4<T: Real>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!(
            "{what} expects [N, C, H, W], got {:?}",
            x.shape()
        ))),
    }
}

impl<T: Real> Conv<T> {
    pub fn new(cin: usize, cout: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        Conv {
            cin,
            cout,
            weight: uniform(rng, &[cout, cin, 3, 3], cin * 9),
            bias: with_bias.then(|| Tensor::zeros(&[cout])),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let d = dims4(x, "conv")?;
        if d.1 != self.cin {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.cin, d.1
            )));
        }
        Ok(d)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, _, h, w) = self.check(x)?;
        let per_in = self.cin * h * w;
        let per_out = self.cout * h * w;
        let mut y = vec![T::zero(); n * per_out];
        let wt = self.weight.data();
        let bias = self.bias.as_ref().map(|b| b.data());
        y.par_chunks_mut(per_out)
            .zip(x.data().par_chunks(per_in))
            .for_each(|(ys, xs)| {
                conv_sample(xs, ys, wt, bias, self.cin, self.cout, h, w);
            });
        Tensor::from_vec(&[n, self.cout, h, w], y)
    }

    /// Returns `(grad_x, [grad_weight, grad_bias?])`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        need_params: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (n, _, h, w) = self.check(x)?;
        if gy.shape() != [n, self.cout, h, w] {
            return Err(Error::shape(format!(
                "conv grad has shape {:?}, expected {:?}",
                gy.shape(),
                [n, self.cout, h, w]
            )));
        }
        let per_in = self.cin * h * w;
        let per_out = self.cout * h * w;
        let wt = self.weight.data();
        let nw = wt.len();
        let parts: Vec<(Vec<T>, Vec<T>)> = x
            .data()
            .par_chunks(per_in)
            .zip(gy.data().par_chunks(per_out))
            .map(|(xs, gs)| {
                let mut gx = vec![T::zero(); per_in];
                let mut gw = if need_params {
                    vec![T::zero(); nw]
                } else {
                    Vec::new()
                };
                conv_sample_backward(xs, gs, wt, &mut gx, &mut gw, self.cin, self.cout, h, w);
                (gx, gw)
            })
            .collect();
        let mut gx = Vec::with_capacity(n * per_in);
        let mut gw = vec![T::zero(); if need_params { nw } else { 0 }];
        for (gxs, gws) in parts {
            gx.extend_from_slice(&gxs);
            for (a, b) in gw.iter_mut().zip(&gws) {
                *a += *b;
            }
        }
        let mut grads = Vec::new();
        if need_params {
            grads.push(Tensor::from_vec(self.weight.shape(), gw)?);
            if self.bias.is_some() {
                let mut gb = vec![T::zero(); self.cout];
                let hw = h * w;
                for s in 0..n {
                    for (o, g) in gb.iter_mut().enumerate() {
                        let off = s * per_out + o * hw;
                        *g += gy.data()[off..off + hw].iter().copied().sum();
                    }
                }
                grads.push(Tensor::from_vec(&[self.cout], gb)?);
            }
        }
        Ok((Tensor::from_vec(x.shape(), gx)?, grads))
    }
}

/// Valid index window for a tap offset `d` in `{-1, 0, 1}` over extent `len`.
#[inline]
fn tap_range(d: isize, len: usize) -> (usize, usize) {
    let lo = if d < 0 { 1 } else { 0 };
    let hi = if d > 0 { len - 1 } else { len };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_sample<T: Real>(
    x: &[T],
    y: &mut [T],
    wt: &[T],
    bias: Option<&[T]>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    for o in 0..cout {
        let yo = &mut y[o * hw..(o + 1) * hw];
        let b = bias.map(|b| b[o]).unwrap_or_else(T::zero);
        yo.fill(b);
        for c in 0..cin {
            let xc = &x[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (i0, i1) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (j0, j1) = tap_range(dx, w);
                    let wv = wt[((o * cin + c) * 3 + ky) * 3 + kx];
                    let sj0 = (j0 as isize + dx) as usize;
                    let len = j1 - j0;
                    for i in i0..i1 {
                        let si = (i as isize + dy) as usize;
                        let dst = &mut yo[i * w + j0..i * w + j0 + len];
                        let src = &xc[si * w + sj0..si * w + sj0 + len];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, fixed combination order.
#[inline]
fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[allow(clippy::too_many_arguments)]
fn conv_sample_backward<T: Real>(
    x: &[T],
    gy: &[T],
    wt: &[T],
    gx: &mut [T],
    gw: &mut [T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let hw = h * w;
    let need_w = !gw.is_empty();
    for o in 0..cout {
        let go = &gy[o * hw..(o + 1) * hw];
        for c in 0..cin {
            let xc = &x[c * hw..(c + 1) * hw];
            let gxc = &mut gx[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (i0, i1) = tap_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (j0, j1) = tap_range(dx, w);
                    let widx = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let wv = wt[widx];
                    let sj0 = (j0 as isize + dx) as usize;
                    let len = j1 - j0;
                    let mut acc = T::zero();
                    for i in i0..i1 {
                        let si = (i as isize + dy) as usize;
                        let g = &go[i * w + j0..i * w + j0 + len];
                        let dst = &mut gxc[si * w + sj0..si * w + sj0 + len];
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                        if need_w {
                            acc += dot_lanes(g, &xc[si * w + sj0..si * w + sj0 + len]);
                        }
                    }
                    if need_w {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }

    /// `(batch, spatial)` extents for an input `[N, C, ...]`.
    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels {
            return Err(Error::shape(format!(
                "norm expects [N, {}, ...], got {:?}",
                self.channels, s
            )));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, CacheKind<T>)> {
        let (n, sp) = self.layout(x)?;
        let c = self.channels;
        let eps = T::of(NORM_EPS);
        let xd = x.data();
        let (mean, var, batch) = match mode {
            Mode::Train => {
                let m = T::of((n * sp) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        let off = (s * c + ch) * sp;
                        acc += xd[off..off + sp].iter().copied().sum::<T>();
                    }
                    let mu = acc / m;
                    let mut acc2 = T::zero();
                    for s in 0..n {
                        let off = (s * c + ch) * sp;
                        for &v in &xd[off..off + sp] {
                            acc2 += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = acc2 / m;
                }
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            Mode::Infer | Mode::Frozen => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
                None,
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        let (g, b) = (self.gamma.data(), self.beta.data());
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * sp;
                for k in off..off + sp {
                    let xh = (xd[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    y[k] = g[ch] * xh + b[ch];
                }
            }
        }
        let y = Tensor::from_vec(x.shape(), y)?;
        let kind = if mode == Mode::Infer {
            CacheKind::None
        } else {
            CacheKind::Norm {
                xhat: Tensor::from_vec(x.shape(), xhat)?,
                inv_std,
                batch_stats: batch,
            }
        };
        Ok((y, kind))
    }

    fn backward(
        &self,
        xhat: &Tensor<T>,
        inv_std: &[T],
        train: bool,
        gy: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (n, sp) = self.layout(xhat)?;
        if gy.shape() != xhat.shape() {
            return Err(Error::shape("norm grad shape mismatch"));
        }
        let c = self.channels;
        let (xh, g) = (xhat.data(), gy.data());
        let gamma = self.gamma.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * sp;
                for k in off..off + sp {
                    dgamma[ch] += g[k] * xh[k];
                    dbeta[ch] += g[k];
                }
            }
        }
        let mut gx = vec![T::zero(); g.len()];
        let m = T::of((n * sp) as f64);
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            // sums of dxhat and dxhat·xhat are gamma·dbeta and gamma·dgamma
            let mean_g = dbeta[ch] / m;
            let mean_gx = dgamma[ch] / m;
            for s in 0..n {
                let off = (s * c + ch) * sp;
                for k in off..off + sp {
                    gx[k] = if train {
                        scale * (g[k] - mean_g - xh[k] * mean_gx)
                    } else {
                        scale * g[k]
                    };
                }
            }
        }
        Ok((
            Tensor::from_vec(xhat.shape(), gx)?,
            vec![
                Tensor::from_vec(&[c], dgamma)?,
                Tensor::from_vec(&[c], dbeta)?,
            ],
        ))
    }

    fn absorb(&mut self, mean: &[T], var: &[T]) {
        let mo = T::of(NORM_MOMENTUM);
        let one = T::one();
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = mo * *r + (one - mo) * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = mo * *r + (one - mo) * v;
        }
    }
}

impl<T: Real> Affine<T> {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        Affine {
            fin,
            fout,
            weight: uniform(rng, &[fout, fin], fin),
            bias: Tensor::zeros(&[fout]),
        }
    }

    fn batch(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, per) = x.batch_split();
        if per != self.fin {
            return Err(Error::shape(format!(
                "affine expects {} features per sample, got {:?}",
                self.fin,
                x.shape()
            )));
        }
        Ok(n)
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.batch(x)?;
        let (w, b) = (self.weight.data(), self.bias.data());
        let mut y = vec![T::zero(); n * self.fout];
        for s in 0..n {
            let xs = x.batch_item(s);
            for o in 0..self.fout {
                let row = &w[o * self.fin..(o + 1) * self.fin];
                let mut acc = b[o];
                for (&a, &v) in row.iter().zip(xs) {
                    acc += a * v;
                }
                y[s * self.fout + o] = acc;
            }
        }
        Tensor::from_vec(&[n, self.fout], y)
    }

    fn backward(
        &self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        need_params: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let n = self.batch(x)?;
        if gy.shape() != [n, self.fout] {
            return Err(Error::shape("affine grad shape mismatch"));
        }
        let w = self.weight.data();
        let g = gy.data();
        let mut gx = vec![T::zero(); n * self.fin];
        for s in 0..n {
            let gxs = &mut gx[s * self.fin..(s + 1) * self.fin];
            for o in 0..self.fout {
                let go = g[s * self.fout + o];
                let row = &w[o * self.fin..(o + 1) * self.fin];
                for (d, &a) in gxs.iter_mut().zip(row) {
                    *d += a * go;
                }
            }
        }
        let mut grads = Vec::new();
        if need_params {
            let mut gw = vec![T::zero(); self.fout * self.fin];
            let mut gb = vec![T::zero(); self.fout];
            for s in 0..n {
                let xs = x.batch_item(s);
                for o in 0..self.fout {
                    let go = g[s * self.fout + o];
                    gb[o] += go;
                    let row = &mut gw[o * self.fin..(o + 1) * self.fin];
                    for (d, &v) in row.iter_mut().zip(xs) {
                        *d += go * v;
                    }
                }
            }
            grads.push(Tensor::from_vec(&[self.fout, self.fin], gw)?);
            grads.push(Tensor::from_vec(&[self.fout], gb)?);
        }
        Ok((Tensor::from_vec(x.shape(), gx)?, grads))
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

fn silu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != gy.shape() {
        return Err(Error::shape("silu grad shape mismatch"));
    }
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn pool_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "avgpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avgpool2 needs even spatial extents, got {h}×{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let q = T::of(0.25);
    let xd = x.data();
    let mut y = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let xs = &xd[p * h * w..(p + 1) * h * w];
        let ys = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let a = (2 * i) * w + 2 * j;
                ys[i * wo + j] = q * (xs[a] + xs[a + 1] + xs[a + w] + xs[a + w + 1]);
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], y)
}

fn pool_backward<T: Real>(in_shape: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    if gy.shape() != [n, c, ho, wo] {
        return Err(Error::shape("avgpool2 grad shape mismatch"));
    }
    let q = T::of(0.25);
    let g = gy.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let v = q * g[p * ho * wo + i * wo + j];
                let a = p * h * w + (2 * i) * w + 2 * j;
                gx[a] = v;
                gx[a + 1] = v;
                gx[a + w] = v;
                gx[a + w + 1] = v;
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

fn upsample_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(x, "upsample2")?;
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut y = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                y[p * ho * wo + i * wo + j] = xd[p * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    Tensor::from_vec(&[n, c, ho, wo], y)
}

fn upsample_backward<T: Real>(in_shape: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    if gy.shape() != [n, c, ho, wo] {
        return Err(Error::shape("upsample2 grad shape mismatch"));
    }
    let g = gy.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                gx[p * h * w + (i / 2) * w + j / 2] += g[p * ho * wo + i * wo + j];
            }
        }
    }
    Tensor::from_vec(in_shape, gx)
}

impl<T: Real> ResnetBlock<T> {
    pub fn new(channels: usize, h: f64, rng: &mut impl Rng) -> Self {
        ResnetBlock {
            h: T::of(h),
            k2: Conv::new(channels, channels, false, rng),
            norm: BatchNorm::new(channels),
            k1: Conv::new(channels, channels, false, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, CacheKind<T>)> {
        let a = self.k2.forward(x)?;
        let (b, norm_cache) = self.norm.forward(&a, mode)?;
        let c = silu_forward(&b);
        let d = self.k1.forward(&c)?;
        let mut y = x.clone();
        for (yv, &dv) in y.data_mut().iter_mut().zip(d.data()) {
            *yv -= self.h * dv;
        }
        let kind = if mode == Mode::Infer {
            CacheKind::None
        } else {
            CacheKind::Resnet(Box::new([
                Cache {
                    mode,
                    kind: CacheKind::Input(x.clone()),
                },
                Cache {
                    mode,
                    kind: norm_cache,
                },
                Cache {
                    mode,
                    kind: CacheKind::Input(b),
                },
                Cache {
                    mode,
                    kind: CacheKind::Input(c),
                },
            ]))
        };
        Ok((y, kind))
    }

    fn backward(
        &self,
        parts: &[Cache<T>; 4],
        gy: &Tensor<T>,
        need_params: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let x = input_of(&parts[0])?;
        let b = input_of(&parts[2])?;
        let c = input_of(&parts[3])?;
        let mut gd = gy.clone();
        gd.scale(-self.h);
        let (gc, k1_grads) = self.k1.backward(c, &gd, need_params)?;
        let gb = silu_backward(b, &gc)?;
        let (ga, norm_grads) = match &parts[1].kind {
            CacheKind::Norm { xhat, inv_std, .. } => {
                self.norm
                    .backward(xhat, inv_std, parts[1].mode == Mode::Train, &gb)?
            }
            _ => return Err(Error::Contract("resnet cache missing norm state".into())),
        };
        let (mut gx, k2_grads) = self.k2.backward(x, &ga, need_params)?;
        gx.add_assign(gy);
        let mut grads = Vec::new();
        if need_params {
            grads.extend(k2_grads);
            grads.extend(norm_grads);
            grads.extend(k1_grads);
        }
        Ok((gx, grads))
    }
}

fn input_of<T>(c: &Cache<T>) -> Result<&Tensor<T>> {
    match &c.kind {
        CacheKind::Input(t) => Ok(t),
        _ => Err(Error::Contract("cache does not hold the layer input".into())),
    }
}

impl<T: Real> Layer<T> {
    pub fn new(spec: &LayerSpec, rng: &mut impl Rng) -> Result<Self> {
        Ok(match spec {
            LayerSpec::Conv3x3 { channels } => Layer::Conv(Conv::new(*channels, *channels, true, rng)),
            LayerSpec::ConvCc {
                in_channels,
                out_channels,
            } => Layer::Conv(Conv::new(*in_channels, *out_channels, true, rng)),
            LayerSpec::Silu => Layer::Silu,
            LayerSpec::Norm { channels } => Layer::Norm(BatchNorm::new(*channels)),
            LayerSpec::Avgpool2 => Layer::AvgPool2,
            LayerSpec::Upsample2 => Layer::Upsample2,
            LayerSpec::Affine {
                in_features,
                out_features,
            } => Layer::Affine(Affine::new(*in_features, *out_features, rng)),
            LayerSpec::Reshape { shape } => Layer::Reshape(shape.clone()),
            LayerSpec::ResnetBlock { channels, h } => {
                if !(h.is_finite() && *h >= 0.0) {
                    return Err(Error::Invalid(format!("resnet step h must be >= 0, got {h}")));
                }
                Layer::Resnet(ResnetBlock::new(*channels, *h, rng))
            }
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) if c.cin == c.cout => LayerSpec::Conv3x3 { channels: c.cin },
            Layer::Conv(c) => LayerSpec::ConvCc {
                in_channels: c.cin,
                out_channels: c.cout,
            },
            Layer::Silu => LayerSpec::Silu,
            Layer::Norm(n) => LayerSpec::Norm {
                channels: n.channels,
            },
            Layer::AvgPool2 => LayerSpec::Avgpool2,
            Layer::Upsample2 => LayerSpec::Upsample2,
            Layer::Affine(a) => LayerSpec::Affine {
                in_features: a.fin,
                out_features: a.fout,
            },
            Layer::Reshape(s) => LayerSpec::Reshape { shape: s.clone() },
            Layer::Resnet(r) => LayerSpec::ResnetBlock {
                channels: r.k1.cin,
                h: r.h.f64(),
            },
        }
    }

    /// Forward pass; in train mode the running statistics are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        let out = self.apply(x, mode)?;
        if mode == Mode::Train {
            self.absorb_stats(&out.1);
        }
        Ok(out)
    }

    /// Forward pass without touching any layer state.
    pub fn apply(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        let keep = mode != Mode::Infer;
        let (y, kind) = match self {
            Layer::Conv(c) => (
                c.forward(x)?,
                if keep {
                    CacheKind::Input(x.clone())
                } else {
                    CacheKind::None
                },
            ),
            Layer::Silu => (
                silu_forward(x),
                if keep {
                    CacheKind::Input(x.clone())
                } else {
                    CacheKind::None
                },
            ),
            Layer::Norm(n) => n.forward(x, mode)?,
            Layer::AvgPool2 => (pool_forward(x)?, CacheKind::Shape(x.shape().to_vec())),
            Layer::Upsample2 => (upsample_forward(x)?, CacheKind::Shape(x.shape().to_vec())),
            Layer::Affine(a) => (
                a.forward(x)?,
                if keep {
                    CacheKind::Input(x.clone())
                } else {
                    CacheKind::None
                },
            ),
            Layer::Reshape(shape) => {
                let (n, per) = x.batch_split();
                let target: usize = shape.iter().product();
                if per != target {
                    return Err(Error::shape(format!(
                        "cannot reshape {:?} into [N, {:?}]",
                        x.shape(),
                        shape
                    )));
                }
                let mut full = vec![n];
                full.extend_from_slice(shape);
                (x.clone().reshape(&full)?, CacheKind::Shape(x.shape().to_vec()))
            }
            Layer::Resnet(r) => r.forward(x, mode)?,
        };
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("{:?} forward", self.spec())));
        }
        Ok((y, Cache { mode, kind }))
    }

    /// Folds the batch statistics held in a train-mode cache into the running ones.
    pub fn absorb_stats(&mut self, cache: &Cache<T>) {
        match (self, &cache.kind) {
            (
                Layer::Norm(n),
                CacheKind::Norm {
                    batch_stats: Some((m, v)),
                    ..
                },
            ) => n.absorb(m, v),
            (Layer::Resnet(r), CacheKind::Resnet(parts)) => {
                if let CacheKind::Norm {
                    batch_stats: Some((m, v)),
                    ..
                } = &parts[1].kind
                {
                    r.norm.absorb(m, v);
                }
            }
            _ => {}
        }
    }

    /// Returns `(grad_x, grad_params)` with `grad_params` in [`Layer::params`] order.
    pub fn backward(&self, cache: &Cache<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.backward_impl(cache, gy, true)
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, cache: &Cache<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward_impl(cache, gy, false)?.0)
    }

    fn backward_impl(
        &self,
        cache: &Cache<T>,
        gy: &Tensor<T>,
        need_params: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if cache.mode == Mode::Infer {
            return Err(Error::Contract(
                "backward called with an infer-mode cache".into(),
            ));
        }
        let out = match (self, &cache.kind) {
            (Layer::Conv(c), CacheKind::Input(x)) => c.backward(x, gy, need_params)?,
            (Layer::Silu, CacheKind::Input(x)) => (silu_backward(x, gy)?, vec![]),
            (Layer::Norm(n), CacheKind::Norm { xhat, inv_std, .. }) => {
                let (gx, g) = n.backward(xhat, inv_std, cache.mode == Mode::Train, gy)?;
                (gx, if need_params { g } else { vec![] })
            }
            (Layer::AvgPool2, CacheKind::Shape(s)) => (pool_backward(s, gy)?, vec![]),
            (Layer::Upsample2, CacheKind::Shape(s)) => (upsample_backward(s, gy)?, vec![]),
            (Layer::Affine(a), CacheKind::Input(x)) => a.backward(x, gy, need_params)?,
            (Layer::Reshape(_), CacheKind::Shape(s)) => (gy.clone().reshape(s)?, vec![]),
            (Layer::Resnet(r), CacheKind::Resnet(parts)) => r.backward(parts, gy, need_params)?,
            _ => {
                return Err(Error::Contract(
                    "cache was not produced by this layer".into(),
                ))
            }
        };
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::Norm(n) => vec![&n.gamma, &n.beta],
            Layer::Affine(a) => vec![&a.weight, &a.bias],
            Layer::Resnet(r) => vec![&r.k2.weight, &r.norm.gamma, &r.norm.beta, &r.k1.weight],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => std::iter::once(&mut c.weight)
                .chain(c.bias.as_mut())
                .collect(),
            Layer::Norm(n) => vec![&mut n.gamma, &mut n.beta],
            Layer::Affine(a) => vec![&mut a.weight, &mut a.bias],
            Layer::Resnet(r) => vec![
                &mut r.k2.weight,
                &mut r.norm.gamma,
                &mut r.norm.beta,
                &mut r.k1.weight,
            ],
            _ => vec![],
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            Layer::Conv(c) if c.bias.is_some() => vec!["weight", "bias"],
            Layer::Conv(_) => vec!["weight"],
            Layer::Norm(_) => vec!["gamma", "beta"],
            Layer::Affine(_) => vec!["weight", "bias"],
            Layer::Resnet(_) => vec!["k2.weight", "norm.gamma", "norm.beta", "k1.weight"],
            _ => vec![],
        }
    }

    /// Non-trainable state (running normalization statistics).
    pub fn buffers(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Norm(n) => vec![
                ("running_mean", &n.running_mean),
                ("running_var", &n.running_var),
            ],
            Layer::Resnet(r) => vec![
                ("norm.running_mean", &r.norm.running_mean),
                ("norm.running_var", &r.norm.running_var),
            ],
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Norm(n) => vec![
                ("running_mean", &mut n.running_mean),
                ("running_var", &mut n.running_var),
            ],
            Layer::Resnet(r) => vec![
                ("norm.running_mean", &mut r.norm.running_mean),
                ("norm.running_var", &mut r.norm.running_var),
            ],
            _ => vec![],
        }
    }

    /// Parameters followed by buffers, with the names used in
    /// [`Layer::param_names`] and [`Layer::buffers`].
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            Layer::Conv(Conv { weight, bias, .. }) => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            Layer::Norm(BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            }) => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
            Layer::Affine(Affine { weight, bias, .. }) => vec![("weight", weight), ("bias", bias)],
            Layer::Resnet(ResnetBlock { k2, norm, k1, .. }) => vec![
                ("k2.weight", &mut k2.weight),
                ("norm.gamma", &mut norm.gamma),
                ("norm.beta", &mut norm.beta),
                ("k1.weight", &mut k1.weight),
                ("norm.running_mean", &mut norm.running_mean),
                ("norm.running_var", &mut norm.running_var),
            ],
            _ => vec![],
        }
    }
}
