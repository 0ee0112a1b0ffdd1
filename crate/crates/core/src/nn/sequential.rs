use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{Cache, Layer, LayerSpec, Mode};
use crate::tensor::{Real, Tensor};

/// A feed-forward stack of layers.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

pub type Caches<T> = Vec<Cache<T>>;

impl<T: Real> Sequential<T> {
    pub fn new(specs: &[LayerSpec], rng: &mut impl Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| Layer::new(s, rng))
            .collect::<Result<_>>()?;
        Ok(Sequential { layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Caches<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&cur, mode)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    pub fn apply(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Caches<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, c) = layer.apply(&cur, mode)?;
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    /// Folds train-mode batch statistics from `caches` into the running ones.
    pub fn absorb_stats(&mut self, caches: &Caches<T>) {
        for (layer, c) in self.layers.iter_mut().zip(caches) {
            layer.absorb_stats(c);
        }
    }

    /// Inference without caches.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.apply(&cur, Mode::Infer)?.0;
        }
        Ok(cur)
    }

    /// Returns `(grad_x, grads)` with `grads` in [`Sequential::params`] order.
    pub fn backward(&self, caches: &Caches<T>, gy: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        self.check_caches(caches)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = gy.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (gx, gp) = layer.backward(cache, &g)?;
            per_layer.push(gp);
            g = gx;
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }

    pub fn backward_input(&self, caches: &Caches<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_caches(caches)?;
        let mut g = gy.clone();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = layer.backward_input(cache, &g)?;
        }
        Ok(g)
    }

    fn check_caches(&self, caches: &Caches<T>) -> Result<()> {
        if caches.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameter and buffer tensors with stable dotted names.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.param_names().into_iter().zip(layer.params()) {
                out.push((format!("{prefix}.{i}.{name}"), p));
            }
            for (name, b) in layer.buffers() {
                out.push((format!("{prefix}.{i}.{name}"), b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("{prefix}.{i}.{name}"), t));
            }
        }
        out
    }
}

/// Zero tensors matching `params`.
pub fn zeros_like<T: Real>(params: &[&Tensor<T>]) -> Vec<Tensor<T>> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// `acc += g` element-wise over two parameter lists.
pub fn accumulate<T: Real>(acc: &mut [Tensor<T>], g: &[Tensor<T>]) {
    assert_eq!(acc.len(), g.len(), "gradient list length mismatch");
    for (a, b) in acc.iter_mut().zip(g) {
        a.add_assign(b);
    }
}
