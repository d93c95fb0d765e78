//! Adam with linear warmup and linear decay.

use crate::encoder::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Learning rate per 1-based step: rises linearly over `warmup` steps,
/// then falls linearly so the step after `total` would be zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub const WARMUP_FRACTION: f64 = 0.1;

    pub fn new(peak: f64, total: u64) -> Self {
        Schedule {
            peak,
            warmup: (total as f64 * Self::WARMUP_FRACTION).round() as u64,
            total,
        }
    }

    pub fn constant(peak: f64) -> Self {
        Schedule {
            peak,
            warmup: 0,
            total: u64::MAX,
        }
    }

    pub fn rate(&self, step: u64) -> f64 {
        if step == 0 || step > self.total {
            return 0.0;
        }
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if self.total == u64::MAX {
            return self.peak;
        }
        self.peak * (self.total - step + 1) as f64 / (self.total - self.warmup) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Adam {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Adds moments for parameters registered after construction.
    pub fn extend_to(&mut self, params: &ParamStore<T>) {
        for t in &params.tensors()[self.first.len()..] {
            self.first.push(vec![T::zero(); t.len()]);
            self.second.push(vec![T::zero(); t.len()]);
        }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn set_moments(&mut self, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Result<()> {
        let shape_ok = |m: &[Vec<T>]| m.len() == self.first.len() && m.iter().zip(&self.first).all(|(a, b)| a.len() == b.len());
        if !shape_ok(&first) || !shape_ok(&second) {
            return Err(Error::Invariant("optimizer moments do not match parameters".into()));
        }
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left alone. A zero rate leaves every parameter untouched.
    /// Returns the global gradient norm before clipping.
    pub fn update(&mut self, params: &mut ParamStore<T>, bound: &Bound, grads: &Gradients<T>, lr: f64) -> f64 {
        self.step += 1;
        let mut sq = 0.0;
        for id in params.ids() {
            if let Some(g) = grads.get(bound.var(id)) {
                sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if lr == 0.0 {
            return norm;
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let c = &self.config;
        let (b1, b2) = (T::from_real(c.beta1), T::from_real(c.beta2));
        let (one_b1, one_b2) = (T::from_real(1.0 - c.beta1), T::from_real(1.0 - c.beta2));
        let t = self.step as i32;
        let correct1 = T::from_real(1.0 - c.beta1.powi(t));
        let correct2 = T::from_real(1.0 - c.beta2.powi(t));
        let (lr, eps, clip) = (T::from_real(lr), T::from_real(c.eps), T::from_real(clip));
        for id in params.ids() {
            let Some(g) = grads.get(bound.var(id)) else { continue };
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g[k] * clip;
                let m = b1 * self.first[i][k] + one_b1 * gk;
                let v = b2 * self.second[i][k] + one_b2 * gk * gk;
                self.first[i][k] = m;
                self.second[i][k] = v;
                let mhat = m / correct1;
                let vhat = v / correct2;
                p[k] = p[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        norm
    }

    /// Moments as tensors, in parameter order.
    pub fn moment_tensors(&self) -> (Vec<Tensor<T>>, Vec<Tensor<T>>) {
        let to = |m: &[Vec<T>]| m.iter().map(|v| Tensor::new(vec![v.len()], v.clone()).expect("flat")).collect();
        (to(&self.first), to(&self.second))
    }
}
