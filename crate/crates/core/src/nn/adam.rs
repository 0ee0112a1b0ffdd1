//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad Adam settings {:?}", self)))
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    /// `sizes` lists the length of every parameter group, in the order later
    /// passed to [`Adam::step`].
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step_count: 0,
            moments: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                })
                .collect(),
        })
    }

    /// One update. The step is refused (state untouched) if any gradient is
    /// not finite.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::Contract(format!(
                "Adam tracks {} groups, got {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), mo)) in params.iter().zip(grads).zip(&self.moments).enumerate() {
            if p.len() != mo.m.len() || g.len() != mo.m.len() {
                return Err(Error::shape(format!("Adam group {i} length mismatch")));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("Adam gradients".into()));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(c.lr);
        let eps = T::of(c.eps);
        for ((p, g), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for k in 0..p.len() {
                let gk = g[k];
                mo.m[k] = b1 * mo.m[k] + (one - b1) * gk;
                mo.v[k] = b2 * mo.v[k] + (one - b2) * gk * gk;
                let mhat = mo.m[k] / bc1;
                let vhat = mo.v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
