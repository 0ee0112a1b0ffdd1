//! Joint training of the paired autoencoders.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::PairedDataset;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Caches, Mode};
use crate::paired::{LatentMap, Normalizer, PairedModel};
use crate::tensor::{Real, Tensor};
use crate::wave::relative_velocity_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    None,
    DataSpace,
    ModelSpace,
    Both,
}

impl Coupling {
    pub fn data_space(self) -> bool {
        matches!(self, Coupling::DataSpace | Coupling::Both)
    }

    pub fn model_space(self) -> bool {
        matches!(self, Coupling::ModelSpace | Coupling::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub w_data: f64,
    pub w_model: f64,
    pub w_coupling: f64,
    pub coupling: Coupling,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_data: 1.0,
            w_model: 1.0,
            w_coupling: 1.0,
            coupling: Coupling::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_data", self.w_data), ("w_model", self.w_model), ("w_coupling", self.w_coupling)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }
}

/// Loss terms, each `(1/2B) Σ ‖·‖²` over the batch in normalized units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ae_data: f64,
    pub ae_model: f64,
    pub s_data_space: f64,
    pub s_model_space: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn weighted(mut self, w: &LossConfig) -> Self {
        self.total = w.w_data * self.ae_data
            + w.w_model * self.ae_model
            + w.w_coupling * (self.s_data_space + self.s_model_space);
        self
    }

    /// Running mean helper: `self += k · other` on every field.
    fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.ae_data += k * other.ae_data;
        self.ae_model += k * other.ae_model;
        self.s_data_space += k * other.s_data_space;
        self.s_model_space += k * other.s_model_space;
        self.total += k * other.total;
    }

    pub fn coupling(&self) -> f64 {
        self.s_data_space + self.s_model_space
    }
}

fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&shape, data)
}

fn split<T: Real>(t: &Tensor<T>, n: usize) -> (Tensor<T>, Option<Tensor<T>>) {
    let total = t.shape()[0];
    if total == n {
        return (t.clone(), None);
    }
    (t.slice_batch(0, n), Some(t.slice_batch(n, total - n)))
}

/// `½‖y_i − t_i‖²/B` summed over rows, with the matching gradient `w (y − t)/B`.
fn sq_loss<T: Real>(y: &[T], t: &[T], b: usize, w: f64, grad: Option<&mut [T]>) -> f64 {
    let inv = 1.0 / b as f64;
    let mut acc = 0.0;
    for (a, c) in y.iter().zip(t) {
        let d = (*a - *c).f64();
        acc += d * d;
    }
    if let Some(g) = grad {
        let k = T::of(w * inv);
        for ((gi, a), c) in g.iter_mut().zip(y).zip(t) {
            *gi = (*a - *c) * k;
        }
    }
    0.5 * acc * inv
}

struct Pass<T> {
    loss: LossBreakdown,
    grads: Option<Vec<Tensor<T>>>,
    caches: [Caches<T>; 4],
}

fn pass<T: Real>(
    m: &PairedModel<T>,
    qn: &Tensor<T>,
    bn: &Tensor<T>,
    w: &LossConfig,
    mode: Mode,
    want_grads: bool,
) -> Result<Pass<T>> {
    let b = qn.shape()[0];
    if bn.shape()[0] != b || b == 0 {
        return Err(Error::shape(format!(
            "model batch {:?} and data batch {:?} differ",
            qn.shape(),
            bn.shape()
        )));
    }
    if want_grads && mode == Mode::Infer {
        return Err(Error::Contract("gradients need train or frozen mode".into()));
    }
    let (zq, c_eq) = m.enc_model.apply(qn, mode)?;
    let (zb, c_eb) = m.enc_data.apply(bn, mode)?;
    let in_q = if w.coupling.model_space() {
        concat(&zq, &m.map_dagger.apply(&zb)?)?
    } else {
        zq.clone()
    };
    let in_b = if w.coupling.data_space() {
        concat(&zb, &m.map.apply(&zq)?)?
    } else {
        zb.clone()
    };
    let (yq, c_dq) = m.dec_model.apply(&in_q, mode)?;
    let (yb, c_db) = m.dec_data.apply(&in_b, mode)?;

    let (nq, nb) = (qn.len(), bn.len());
    let mut gq = want_grads.then(|| Tensor::<T>::zeros(yq.shape()));
    let mut gb = want_grads.then(|| Tensor::<T>::zeros(yb.shape()));
    let mut loss = LossBreakdown::default();
    {
        let (y, t) = (yq.data(), qn.data());
        let mut g = gq.as_mut().map(|g| g.data_mut());
        loss.ae_model = sq_loss(&y[..nq], t, b, w.w_model, g.as_deref_mut().map(|g| &mut g[..nq]));
        if w.coupling.model_space() {
            loss.s_model_space = sq_loss(&y[nq..], t, b, w.w_coupling, g.map(|g| &mut g[nq..]));
        }
    }
    {
        let (y, t) = (yb.data(), bn.data());
        let mut g = gb.as_mut().map(|g| g.data_mut());
        loss.ae_data = sq_loss(&y[..nb], t, b, w.w_data, g.as_deref_mut().map(|g| &mut g[..nb]));
        if w.coupling.data_space() {
            loss.s_data_space = sq_loss(&y[nb..], t, b, w.w_coupling, g.map(|g| &mut g[nb..]));
        }
    }
    let loss = loss.weighted(w);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }

    let grads = match (gq, gb) {
        (Some(gq), Some(gb)) => {
            let (g_inq, g_dq) = m.dec_model.backward(&c_dq, &gq)?;
            let (g_inb, g_db) = m.dec_data.backward(&c_db, &gb)?;
            let (mut gzq, gq_cross) = split(&g_inq, b);
            let (mut gzb, gb_cross) = split(&g_inb, b);
            let mut g_map = None;
            let mut g_dag = None;
            if let Some(g) = gb_cross {
                let (gz, gm) = m.map.backward(&zq, &g)?;
                gzq.add_assign(&gz);
                g_map = gm;
            }
            if let Some(g) = gq_cross {
                let (gz, gm) = m.map_dagger.backward(&zb, &g)?;
                gzb.add_assign(&gz);
                g_dag = gm;
            }
            let (_, g_eq) = m.enc_model.backward(&c_eq, &gzq)?;
            let (_, g_eb) = m.enc_data.backward(&c_eb, &gzb)?;
            let mut all = g_eq;
            all.extend(g_dq);
            all.extend(g_eb);
            all.extend(g_db);
            for (map, g) in [(&m.map, g_map), (&m.map_dagger, g_dag)] {
                if let LatentMap::Linear(t) = map {
                    all.push(g.unwrap_or_else(|| Tensor::zeros(t.shape())));
                }
            }
            Some(all)
        }
        _ => None,
    };
    Ok(Pass {
        loss,
        grads,
        caches: [c_eq, c_dq, c_eb, c_db],
    })
}

/// Loss on one normalized batch `qn: [B,1,nz,nx]`, `bn: [B,ns,nr,nt']`.
pub fn batch_loss<T: Real>(
    m: &PairedModel<T>,
    qn: &Tensor<T>,
    bn: &Tensor<T>,
    w: &LossConfig,
    mode: Mode,
) -> Result<LossBreakdown> {
    Ok(pass(m, qn, bn, w, mode, false)?.loss)
}

/// Loss and gradients in [`PairedModel::params`] order. Layer state is
/// left untouched.
pub fn batch_loss_and_grads<T: Real>(
    m: &PairedModel<T>,
    qn: &Tensor<T>,
    bn: &Tensor<T>,
    w: &LossConfig,
    mode: Mode,
) -> Result<(LossBreakdown, Vec<Tensor<T>>)> {
    let p = pass(m, qn, bn, w, mode, true)?;
    Ok((p.loss, p.grads.expect("requested")))
}

/// A dataset mapped into network units, plus the physical models.
#[derive(Clone, Debug)]
pub struct NormalizedSet {
    pub qn: Tensor<f32>,
    pub bn: Tensor<f32>,
    pub q: Tensor<f32>,
}

impl NormalizedSet {
    pub fn new(norm: &Normalizer, ds: &PairedDataset) -> Result<Self> {
        Ok(NormalizedSet {
            qn: norm.model_in(&ds.models)?,
            bn: norm.data_in(&ds.data)?,
            q: ds.models.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.qn.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let q: Vec<&[f32]> = idx.iter().map(|&i| self.qn.batch_item(i)).collect();
        let b: Vec<&[f32]> = idx.iter().map(|&i| self.bn.batch_item(i)).collect();
        Ok((
            Tensor::stack(&q, &self.qn.shape()[1..])?,
            Tensor::stack(&b, &self.bn.shape()[1..])?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_factor")]
    pub divergence_factor: f64,
    #[serde(default = "default_patience")]
    pub divergence_patience: usize,
}

fn default_factor() -> f64 {
    10.0
}

fn default_patience() -> usize {
    3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            loss: LossConfig::default(),
            seed: 0,
            divergence_factor: default_factor(),
            divergence_patience: default_patience(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.divergence_patience == 0 || self.divergence_factor <= 1.0 {
            return Err(Error::Config("divergence_factor must exceed 1 and patience be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the training log. Epoch 0 is the untrained network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: f64,
    pub val_lfe_err: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,ae_data,ae_model,s_data_space,s_model_space,total,val_total,val_lfe_err";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let t = &self.train;
        format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.epoch, t.ae_data, t.ae_model, t.s_data_space, t.s_model_space, t.total, self.val_total, self.val_lfe_err
        )
    }
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(s.as_bytes()))
        .map_err(|e| Error::file(path, e))
}

/// Inference-mode loss and mean LFE velocity error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub loss: LossBreakdown,
    pub lfe_err: f64,
}

pub fn evaluate_validation(m: &PairedModel<f32>, set: &NormalizedSet, w: &LossConfig, chunk: usize) -> Result<Validation> {
    let n = set.len();
    if n == 0 {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let mut loss = LossBreakdown::default();
    let mut err = 0.0;
    let mut start = 0;
    while start < n {
        let k = chunk.max(1).min(n - start);
        let (qn, bn) = (set.qn.slice_batch(start, k), set.bn.slice_batch(start, k));
        loss.add_scaled(&batch_loss(m, &qn, &bn, w, Mode::Infer)?, k as f64 / n as f64);
        let q_hat = m.norm.model_out(&m.lfe_normalized(&bn)?)?;
        for i in 0..k {
            err += relative_velocity_error(q_hat.batch_item(i), set.q.batch_item(start + i));
        }
        start += k;
    }
    Ok(Validation {
        loss,
        lfe_err: err / n as f64,
    })
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation total.
    pub best: PairedModel<f32>,
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: PairedModel<f32>,
    pub log: Vec<EpochRecord>,
}

/// Minibatch Adam over shuffled pairs. `on_epoch` sees every log row as it
/// is produced, including the rows before a divergence error.
pub fn train(
    mut model: PairedModel<f32>,
    train_set: &NormalizedSet,
    val_set: &NormalizedSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train_set.len();
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 training pairs, got {n}")));
    }
    let bs = cfg.batch_size.min(n);
    let w = cfg.loss;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::<f32>::new(AdamConfig::with_lr(cfg.lr), &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batches = |order: &[usize]| -> Vec<Vec<usize>> {
        order.chunks(bs).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
    };

    let t0 = Instant::now();
    let mut initial = LossBreakdown::default();
    let init_batches = batches(&order);
    for idx in &init_batches {
        let (qn, bn) = train_set.gather(idx)?;
        initial.add_scaled(&batch_loss(&model, &qn, &bn, &w, Mode::Train)?, 1.0 / init_batches.len() as f64);
    }
    let v = evaluate_validation(&model, val_set, &w, bs)?;
    let rec = EpochRecord {
        epoch: 0,
        train: initial,
        val_total: v.loss.total,
        val_lfe_err: v.lfe_err,
        seconds: t0.elapsed().as_secs_f64(),
    };
    on_epoch(&rec);
    let mut log = vec![rec];
    let mut best = (model.clone(), 0, v.loss.total);
    let mut over = 0;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let bl = batches(&order);
        let mut acc = LossBreakdown::default();
        for idx in &bl {
            let (qn, bn) = train_set.gather(idx)?;
            let p = pass(&model, &qn, &bn, &w, Mode::Train, true)?;
            let grads = p.grads.expect("requested");
            let [c_eq, c_dq, c_eb, c_db] = &p.caches;
            model.enc_model.absorb_stats(c_eq);
            model.dec_model.absorb_stats(c_dq);
            model.enc_data.absorb_stats(c_eb);
            model.dec_data.absorb_stats(c_db);
            let gs: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
            let mut ps: Vec<&mut [f32]> = model.params_mut().into_iter().map(|p| p.data_mut()).collect();
            adam.step(&mut ps, &gs)?;
            acc.add_scaled(&p.loss, 1.0 / bl.len() as f64);
        }
        let v = evaluate_validation(&model, val_set, &w, bs)?;
        let rec = EpochRecord {
            epoch,
            train: acc,
            val_total: v.loss.total,
            val_lfe_err: v.lfe_err,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.push(rec);
        if v.loss.total < best.2 {
            best = (model.clone(), epoch, v.loss.total);
        }
        if acc.total > cfg.divergence_factor * initial.total {
            over += 1;
            if over >= cfg.divergence_patience {
                return Err(Error::Diverged {
                    epoch,
                    total: acc.total,
                    initial: initial.total,
                });
            }
        } else {
            over = 0;
        }
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: model,
        log,
    })
}
