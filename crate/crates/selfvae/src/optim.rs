//! AdaMax: Adam's first-moment EMA paired with an infinity-norm second
//! moment, which keeps the effective step bounded by the learning rate.
//!
//! Per step t (1-based), for each parameter value:
//!   m ← β1·m + (1−β1)·g
//!   u ← max(β2·u, |g|)
//!   θ ← θ − (lr / (1−β1^t)) · m / (u + ε),   ε = 1e-8
//!
//! Parameters missing from a step's gradients are treated as g = 0, so
//! their moments decay consistently.

use crate::error::{Error, Result};
use crate::store::{Binding, ParamStore};
use crate::tensor::Gradients;

pub const ADAMAX_EPS: f64 = 1e-8;

pub struct AdaMax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) u: Vec<Vec<f64>>,
    pub(crate) t: u64,
}

impl AdaMax {
    pub const DEFAULT_LR: f64 = 0.002;
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;

    /// Zero-state optimizer sized for every parameter currently in `store`.
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        let u = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        AdaMax { lr, beta1, beta2, m, u, t: 0 }
    }

    pub fn with_defaults(store: &ParamStore) -> Self {
        Self::new(store, Self::DEFAULT_LR, Self::DEFAULT_BETA1, Self::DEFAULT_BETA2)
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// First-moment buffers, one per parameter in registration order.
    pub fn moments_m(&self) -> &[Vec<f64>] {
        &self.m
    }

    /// Infinity-norm moment buffers, one per parameter.
    pub fn moments_u(&self) -> &[Vec<f64>] {
        &self.u
    }

    /// Apply one update using the gradients of `bind`'s leaves.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bind: &Binding,
        grads: &Gradients,
    ) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::contract(format!(
                "optimizer state covers {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let scale = self.lr / (1.0 - self.beta1.powi(self.t as i32));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = grads.grad(bind.get(id));
            let (m, u) = (&mut self.m[i], &mut self.u[i]);
            let theta = store.value_mut(id);
            for j in 0..theta.len() {
                let g = grad.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                u[j] = (self.beta2 * u[j]).max(g.abs());
                theta[j] -= scale * m[j] / (u[j] + ADAMAX_EPS);
            }
        }
        Ok(())
    }

    /// Replace the moment buffers and step counter (checkpoint restore).
    pub fn restore(&mut self, m: Vec<Vec<f64>>, u: Vec<Vec<f64>>, t: u64) -> Result<()> {
        if m.len() != self.m.len()
            || u.len() != self.u.len()
            || m.iter().zip(&self.m).any(|(a, b)| a.len() != b.len())
            || u.iter().zip(&self.u).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::contract("optimizer state layout mismatch"));
        }
        self.m = m;
        self.u = u;
        self.t = t;
        Ok(())
    }
}
