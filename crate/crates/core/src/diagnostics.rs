//! Solver-free quality metrics, density-based OOD gating and the error bounds.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::datagen::PairedDataset;
use crate::error::{Error, Result};
use crate::paired::PairedModel;
use crate::tensor::{dist, norm, Tensor};
use crate::wave::{Acquisition, Grid2D, VelocityModel, WaveSolver};

pub const DEFAULT_OOD_THRESHOLD: f64 = 0.95;
pub const DEFAULT_BINS: usize = 16;
/// In bins.
pub const DEFAULT_SMOOTH_SIGMA: f64 = 1.0;
pub const DENSITY_FORMAT: &str = "pairedinv-density-1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub rre: f64,
    pub rma: f64,
}

fn rel(num: f64, den: f64, what: &str) -> Result<f64> {
    if den == 0.0 {
        return Err(Error::Invalid(format!("{what}: zero reference norm")));
    }
    Ok(num / den)
}

/// `‖b − D_b(M E_q(q̂))‖/‖b‖` with physical data `[ns, nr, nt]` and model `[nz, nx]`.
pub fn rre(m: &PairedModel<f32>, b: &Tensor<f32>, q_hat: &Tensor<f32>) -> Result<f64> {
    let s = b.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("rre expects data [ns, nr, nt], got {s:?}")));
    }
    let q = q_hat.clone().reshape(&batch1(q_hat.shape()))?;
    let pred = m.surrogate_forward(&q, s[2])?;
    rel(dist(pred.data(), b.data()), b.norm(), "rre")
}

/// `‖q̂ − D_q(E_q(q̂))‖/‖q̂‖` for a physical model `[nz, nx]`.
pub fn rma(m: &PairedModel<f32>, q_hat: &Tensor<f32>) -> Result<f64> {
    let q = q_hat.clone().reshape(&batch1(q_hat.shape()))?;
    let back = m.norm.model_out(&m.model_roundtrip(&m.norm.model_in(&q)?)?)?;
    rel(dist(back.data(), q_hat.data()), q_hat.norm(), "rma")
}

fn batch1(s: &[usize]) -> Vec<usize> {
    let mut v = vec![1];
    v.extend_from_slice(s);
    v
}

fn clamp_box(q: &mut Tensor<f32>, c_min: f64, c_max: f64) {
    let (lo, hi) = ((c_min * c_min) as f32, (c_max * c_max) as f32);
    q.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
}

/// Solver-free evaluation of one batch of physical data `[N, ns, nr, nt]`.
#[derive(Clone, Debug)]
pub struct Evaluated {
    /// LFE estimates clamped to the velocity box, `[N, nz, nx]`.
    pub q_hat: Tensor<f32>,
    /// `D_b(M E_q(q̂))` in physical units, `[N, ns, nr, nt]`.
    pub b_hat: Tensor<f32>,
    pub points: Vec<MetricPoint>,
}

/// LFE, RRE and RMA for every pair; processes `chunk` samples at a time.
pub fn evaluate(m: &PairedModel<f32>, b: &Tensor<f32>, c_min: f64, c_max: f64, chunk: usize) -> Result<Evaluated> {
    let s = b.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected [N, ns, nr, nt], got {s:?}")));
    }
    let (n, nt) = (s[0], s[3]);
    let mut q_all = Vec::new();
    let mut b_all = Vec::new();
    let mut points = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let k = chunk.max(1).min(n - start);
        let bb = b.slice_batch(start, k);
        let mut q_hat = m.lfe(&bb)?;
        clamp_box(&mut q_hat, c_min, c_max);
        let b_hat = m.surrogate_forward(&q_hat, nt)?;
        let back = m.norm.model_out(&m.model_roundtrip(&m.norm.model_in(&q_hat)?)?)?;
        for i in 0..k {
            let (bi, qi) = (bb.batch_item(i), q_hat.batch_item(i));
            points.push(MetricPoint {
                rre: rel(dist(b_hat.batch_item(i), bi), norm(bi), "rre")?,
                rma: rel(dist(back.batch_item(i), qi), norm(qi), "rma")?,
            });
        }
        q_all.extend_from_slice(q_hat.data());
        b_all.extend_from_slice(b_hat.data());
        start += k;
    }
    let [_, nz, nx] = m.model_shape();
    Ok(Evaluated {
        q_hat: Tensor::from_vec(&[n, nz, nx], q_all)?,
        b_hat: Tensor::from_vec(s, b_all)?,
        points,
    })
}

/// Smoothed 2-D histogram over `[0, p99.5]` of each axis.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub rre_edges: Vec<f64>,
    pub rma_edges: Vec<f64>,
    /// Row-major `[rre bin][rma bin]`, summing to 1.
    pub cells: Vec<f64>,
    pub n_points: usize,
    pub smooth_sigma: f64,
    /// Cell density of every fitting point, ascending.
    pub reference: Vec<f64>,
}

fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p * (s.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < s.len() {
        s[i] + f * (s[i + 1] - s[i])
    } else {
        s[i]
    }
}

fn edges(v: &[f64], n: usize) -> Vec<f64> {
    let hi = quantile(v, 0.995).max(1e-300);
    (0..=n).map(|k| hi * k as f64 / n as f64).collect()
}

fn bin(edges: &[f64], x: f64) -> Option<usize> {
    let n = edges.len() - 1;
    let hi = edges[n];
    if !(0.0..=hi).contains(&x) {
        return None;
    }
    Some(((x / hi * n as f64) as usize).min(n - 1))
}

fn reflect(i: isize, n: isize) -> usize {
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

fn smooth_axis(cells: &mut [f64], n: usize, sigma: f64, along_rows: bool) {
    let r = (4.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let ws: f64 = w.iter().sum();
    let src = cells.to_vec();
    cells.iter_mut().for_each(|c| *c = 0.0);
    for a in 0..n {
        for b in 0..n {
            let v = if along_rows { src[b * n + a] } else { src[a * n + b] };
            if v == 0.0 {
                continue;
            }
            for (k, wk) in w.iter().enumerate() {
                let t = reflect(b as isize + k as isize - r, n as isize);
                let idx = if along_rows { t * n + a } else { a * n + t };
                cells[idx] += v * wk / ws;
            }
        }
    }
}

pub fn fit_density(points: &[MetricPoint], n_bins: usize, smooth_sigma: f64) -> Result<DensityMap> {
    if points.len() < 30 {
        return Err(Error::Invalid(format!("density fit needs at least 30 points, got {}", points.len())));
    }
    if n_bins == 0 || !(smooth_sigma >= 0.0 && smooth_sigma.is_finite()) {
        return Err(Error::Config(format!("bad density settings: {n_bins} bins, sigma {smooth_sigma}")));
    }
    if points.iter().any(|p| !(p.rre.is_finite() && p.rma.is_finite())) {
        return Err(Error::NonFinite("metric points".into()));
    }
    let re = edges(&points.iter().map(|p| p.rre).collect::<Vec<_>>(), n_bins);
    let me = edges(&points.iter().map(|p| p.rma).collect::<Vec<_>>(), n_bins);
    let mut cells = vec![0.0; n_bins * n_bins];
    for p in points {
        if let (Some(i), Some(j)) = (bin(&re, p.rre), bin(&me, p.rma)) {
            cells[i * n_bins + j] += 1.0;
        }
    }
    if smooth_sigma > 0.0 {
        smooth_axis(&mut cells, n_bins, smooth_sigma, false);
        smooth_axis(&mut cells, n_bins, smooth_sigma, true);
    }
    let total: f64 = cells.iter().sum();
    cells.iter_mut().for_each(|c| *c /= total);
    let mut map = DensityMap {
        rre_edges: re,
        rma_edges: me,
        cells,
        n_points: points.len(),
        smooth_sigma,
        reference: Vec::new(),
    };
    let mut reference: Vec<f64> = points.iter().map(|p| map.density(*p)).collect();
    reference.sort_by(f64::total_cmp);
    map.reference = reference;
    Ok(map)
}

impl DensityMap {
    pub fn n_bins(&self) -> usize {
        self.rre_edges.len() - 1
    }

    /// Cell density at a point; 0 outside the histogram range.
    pub fn density(&self, p: MetricPoint) -> f64 {
        match (bin(&self.rre_edges, p.rre), bin(&self.rma_edges, p.rma)) {
            (Some(i), Some(j)) => self.cells[i * self.n_bins() + j],
            _ => 0.0,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(json!({
            "format": DENSITY_FORMAT,
            "n_points": self.n_points,
            "smooth_sigma": self.smooth_sigma,
        }));
        let n = self.n_bins();
        c.insert("rre_edges", Tensor::from_vec(&[n + 1], self.rre_edges.clone())?);
        c.insert("rma_edges", Tensor::from_vec(&[n + 1], self.rma_edges.clone())?);
        c.insert("cells", Tensor::from_vec(&[n, n], self.cells.clone())?);
        c.insert("reference", Tensor::from_vec(&[self.reference.len()], self.reference.clone())?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |msg: String| Error::Format { offset: 0, msg };
        if c.meta.get("format").and_then(|v| v.as_str()) != Some(DENSITY_FORMAT) {
            return Err(bad("not a density map".into()));
        }
        let get = |k: &str| -> Result<Vec<f64>> { Ok(c.get(k)?.to::<f64>().into_vec()) };
        let map = DensityMap {
            rre_edges: get("rre_edges")?,
            rma_edges: get("rma_edges")?,
            cells: get("cells")?,
            n_points: c.meta["n_points"].as_u64().ok_or_else(|| bad("missing n_points".into()))? as usize,
            smooth_sigma: c.meta["smooth_sigma"].as_f64().ok_or_else(|| bad("missing smooth_sigma".into()))?,
            reference: get("reference")?,
        };
        let n = map.rre_edges.len().saturating_sub(1);
        if n == 0 || map.rma_edges.len() != n + 1 || map.cells.len() != n * n {
            return Err(bad("inconsistent density map shapes".into()));
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OodScore {
    pub density_value: f64,
    /// Fraction of fitting points whose density is at least this point's.
    pub percentile: f64,
    pub is_ood: bool,
}

pub fn ood_score(map: &DensityMap, p: MetricPoint, threshold: f64) -> OodScore {
    let d = map.density(p);
    let below = map.reference.partition_point(|&r| r < d);
    let percentile = (map.reference.len() - below) as f64 / map.reference.len() as f64;
    OodScore {
        density_value: d,
        percentile,
        is_ood: d == 0.0 || percentile > threshold,
    }
}

/// Probability that a positive outranks a negative, ties counted half.
pub fn auroc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Invalid("auroc needs both classes".into()));
    }
    let mut neg = negative.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in positive {
        let lt = neg.partition_point(|&x| x < p);
        let le = neg.partition_point(|&x| x <= p);
        wins += lt as f64 + 0.5 * (le - lt) as f64;
    }
    Ok(wins / (positive.len() * negative.len()) as f64)
}

/// `n` index pairs `(i, j)`, `i ≠ j`, such that the first `k` pairs do not
/// depend on `n`.
pub fn random_pairs(len: usize, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    if len < 2 {
        return out;
    }
    while out.len() < n {
        let i = rng.gen_range(0..len);
        let j = rng.gen_range(0..len);
        if i != j {
            out.push((i, j));
        }
    }
    out
}

/// Largest `‖f_i − f_j‖/‖x_i − x_j‖` over the given pairs; pairs with
/// coincident inputs are skipped.
pub fn lipschitz_estimate(x: &[&[f32]], fx: &[&[f32]], pairs: &[(usize, usize)]) -> f64 {
    pairs
        .iter()
        .filter_map(|&(i, j)| {
            let dx = dist(x[i], x[j]);
            (dx > 0.0).then(|| dist(fx[i], fx[j]) / dx)
        })
        .fold(0.0, f64::max)
}

fn rows(t: &Tensor<f32>) -> Vec<&[f32]> {
    (0..t.shape()[0]).map(|i| t.batch_item(i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    /// Forward map, physical units.
    pub l_forward: f64,
    /// Model decoder, latent to normalized model.
    pub l_q: f64,
    /// Data encoder, normalized data to latent.
    pub l_b: f64,
    /// Model autoencoder on normalized models.
    pub l_ae: f64,
    pub xi_q: f64,
    pub xi_b: f64,
    pub xi_m: f64,
    pub delta: f64,
    /// Largest physical LFE error.
    pub eps_q: f64,
    pub m_dagger_norm: f64,
    /// `σ√dim` of the synthesis noise.
    pub noise_norm: f64,
    pub n_samples: usize,
    pub n_pairs: usize,
}

impl ConstantEstimates {
    pub fn theorem_bound(&self) -> f64 {
        self.l_q * (self.m_dagger_norm * (self.l_b * self.delta + self.xi_b) + self.xi_m) + self.xi_q
    }
}

/// Maxima over a validation set; Lipschitz constants over `pair_samples`
/// random pairs.
pub fn estimate_constants(
    m: &PairedModel<f32>,
    val: &PairedDataset,
    pair_samples: usize,
    seed: u64,
    c_min: f64,
    c_max: f64,
) -> Result<ConstantEstimates> {
    let n = val.len();
    if n < 2 {
        return Err(Error::Invalid("constant estimation needs at least 2 pairs".into()));
    }
    let qn = m.norm.model_in(&val.models)?;
    let bn = m.norm.data_in(&val.data)?;
    let zq = m.encode_model(&qn)?;
    let zb = m.encode_data(&bn)?;
    let aq = m.decode_model(&zq)?;
    let mzq = m.latent_map(&zq)?;
    let b_bar = m.decode_data(&mzq)?;
    let mut q_hat = m.norm.model_out(&m.decode_model(&m.latent_map_dagger(&zb)?)?)?;
    clamp_box(&mut q_hat, c_min, c_max);

    let max_dist = |a: &Tensor<f32>, b: &Tensor<f32>| -> f64 {
        (0..a.shape()[0]).map(|i| dist(a.batch_item(i), b.batch_item(i))).fold(0.0, f64::max)
    };
    let xi_q = max_dist(&aq, &qn);
    let delta = max_dist(&b_bar, &bn);
    let eps_q = max_dist(&q_hat, &val.models);
    let xi_m = max_dist(&m.latent_map_dagger(&mzq)?, &zq);
    let xi_b = max_dist(&m.encode_data(&m.decode_data(&zb)?)?, &zb).max(max_dist(&m.encode_data(&b_bar)?, &mzq));

    let pairs = random_pairs(n, pair_samples, seed);
    let [ns, nr, nt] = [val.data.shape()[1], val.data.shape()[2], val.data.shape()[3]];
    Ok(ConstantEstimates {
        l_forward: lipschitz_estimate(&rows(&val.models), &rows(&val.data), &pairs),
        l_q: lipschitz_estimate(&rows(&zq), &rows(&aq), &pairs),
        l_b: lipschitz_estimate(&rows(&bn), &rows(&zb), &pairs),
        l_ae: lipschitz_estimate(&rows(&qn), &rows(&aq), &pairs),
        xi_q,
        xi_b,
        xi_m,
        delta,
        eps_q,
        m_dagger_norm: m.map_dagger.spectral_norm(),
        noise_norm: val.noise_sigma * ((ns * nr * nt) as f64).sqrt(),
        n_samples: n,
        n_pairs: pairs.len(),
    })
}

/// One test pair checked against the bounds. Residuals are physical; model
/// errors are in normalized model units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub sample: usize,
    pub point: MetricPoint,
    pub residual: f64,
    pub prop1_bound1: f64,
    pub prop1_holds1: bool,
    pub prop1_bound2: f64,
    pub prop1_holds2: bool,
    pub model_err: f64,
    pub prop2_bound: Option<f64>,
    pub theorem_bound: f64,
    pub theorem_holds: bool,
}

impl BoundRow {
    pub fn prop2_holds(&self) -> Option<bool> {
        self.prop2_bound.map(|b| self.model_err <= b)
    }
}

#[derive(Clone, Debug)]
pub struct BoundReport {
    pub constants: ConstantEstimates,
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    fn rate(&self, f: impl Fn(&BoundRow) -> bool) -> f64 {
        self.rows.iter().filter(|r| f(r)).count() as f64 / self.rows.len() as f64
    }

    pub fn prop1_rate1(&self) -> f64 {
        self.rate(|r| r.prop1_holds1)
    }

    pub fn prop1_rate2(&self) -> f64 {
        self.rate(|r| r.prop1_holds2)
    }

    pub fn theorem_rate(&self) -> f64 {
        self.rate(|r| r.theorem_holds)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "sample,rre,rma,residual,prop1_bound1,prop1_holds1,prop1_bound2,prop1_holds2,model_err,prop2_bound,prop2_holds,theorem_bound,theorem_holds\n",
        );
        for r in &self.rows {
            let p2 = r.prop2_bound.map_or("inapplicable".to_string(), |b| format!("{b:.9e}"));
            let h2 = r.prop2_holds().map_or("inapplicable".to_string(), |h| h.to_string());
            let _ = writeln!(
                s,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.9e},{},{:.9e},{},{},{:.9e},{}",
                r.sample,
                r.point.rre,
                r.point.rma,
                r.residual,
                r.prop1_bound1,
                r.prop1_holds1,
                r.prop1_bound2,
                r.prop1_holds2,
                r.model_err,
                p2,
                h2,
                r.theorem_bound,
                r.theorem_holds
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::file(path, e))
    }
}

/// Checks every test pair against the bounds, with one forward solve each.
#[allow(clippy::too_many_arguments)]
pub fn bound_report(
    m: &PairedModel<f32>,
    test: &PairedDataset,
    consts: &ConstantEstimates,
    solver: &WaveSolver,
    grid: &Grid2D,
    acq: &Acquisition,
    c_min: f64,
    c_max: f64,
) -> Result<BoundReport> {
    if test.is_empty() {
        return Err(Error::Invalid("bound report needs test pairs".into()));
    }
    let ev = evaluate(m, &test.data, c_min, c_max, 16)?;
    let qn_hat = m.norm.model_in(&ev.q_hat)?;
    let qn = m.norm.model_in(&test.models)?;
    let a_hat = m.model_roundtrip(&qn_hat)?;
    let a_true = m.model_roundtrip(&qn)?;
    let grid = *grid;
    let residuals: Vec<Result<(f64, f64)>> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let [nz, nx] = grid.shape();
            let q = Tensor::from_vec(&[nz, nx], ev.q_hat.batch_item(i).to_vec())?;
            let f = solver.simulate(&VelocityModel::new(grid, q)?, acq)?;
            let f = f.values().data();
            Ok((dist(f, test.data.batch_item(i)), dist(f, ev.b_hat.batch_item(i))))
        })
        .collect();
    let theorem = consts.theorem_bound();
    let mut rows = Vec::with_capacity(test.len());
    for (i, r) in residuals.into_iter().enumerate() {
        let (residual, surrogate_gap) = r?;
        let b = test.data.batch_item(i);
        let bound1 = consts.l_forward * consts.eps_q + consts.noise_norm;
        let bound2 = surrogate_gap + dist(ev.b_hat.batch_item(i), b);
        let model_err = dist(qn_hat.batch_item(i), qn.batch_item(i));
        let prop2_bound = (consts.l_ae < 1.0).then(|| {
            (dist(qn_hat.batch_item(i), a_hat.batch_item(i)) + dist(a_true.batch_item(i), qn.batch_item(i)))
                / (1.0 - consts.l_ae)
        });
        rows.push(BoundRow {
            sample: i,
            point: ev.points[i],
            residual,
            prop1_bound1: bound1,
            prop1_holds1: residual <= bound1,
            prop1_bound2: bound2,
            // norms of f32 differences summed in f64 carry ~1e-15 relative roundoff
            prop1_holds2: residual <= bound2 * (1.0 + 1e-12),
            model_err,
            prop2_bound,
            theorem_bound: theorem,
            theorem_holds: model_err <= theorem,
        });
    }
    Ok(BoundReport {
        constants: *consts,
        rows,
    })
}

/// Per-sample OOD table.
pub fn ood_csv(points: &[MetricPoint], scores: &[OodScore]) -> String {
    let mut s = String::from("sample,rre,rma,density,percentile,is_ood\n");
    for (i, (p, o)) in points.iter().zip(scores).enumerate() {
        let _ = writeln!(
            s,
            "{i},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            p.rre, p.rma, o.density_value, o.percentile, o.is_ood
        );
    }
    s
}
