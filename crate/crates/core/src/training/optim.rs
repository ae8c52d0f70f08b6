//! AdamW with decoupled weight decay, and the cosine learning-rate curve.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use wavegms_autodiff::{Float, Gradients, ParamStore};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment estimates are keyed by parameter name so they survive a checkpoint round trip.
pub struct AdamW<F: Float> {
    pub config: AdamWConfig,
    t: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::cast(c.beta1), F::cast(c.beta2));
        let (one_b1, one_b2) = (F::cast(1.0 - c.beta1), F::cast(1.0 - c.beta2));
        let decay = F::cast(1.0 - lr * c.weight_decay);
        let step = F::cast(lr / bc1);
        let inv_sqrt_bc2 = F::cast(1.0 / bc2.sqrt());
        let eps = F::cast(c.eps);
        for p in store.trainable_params() {
            let Some(g) = grads.param(&p) else { continue };
            let name = p.name().to_string();
            let m = self.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v.entry(name).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
            });
            p.update(|w| {
                Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                    *w = *w * decay - step * m / (v.sqrt() * inv_sqrt_bc2 + eps);
                });
            });
        }
    }

    /// `optim.m.<name>` and `optim.v.<name>` tensors.
    pub fn state_tensors(&self) -> BTreeMap<String, ArrayD<F>> {
        let mut out = BTreeMap::new();
        for (k, a) in &self.m {
            out.insert(format!("optim.m.{k}"), a.clone());
        }
        for (k, a) in &self.v {
            out.insert(format!("optim.v.{k}"), a.clone());
        }
        out
    }

    pub fn load_state(&mut self, t: u64, tensors: &BTreeMap<String, ArrayD<F>>) -> Result<()> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, a) in tensors {
            if let Some(name) = k.strip_prefix("optim.m.") {
                m.insert(name.to_string(), a.clone());
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                v.insert(name.to_string(), a.clone());
            }
        }
        if m.keys().ne(v.keys()) {
            return Err(Error::Checkpoint("optimizer first and second moments cover different parameters".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(store: &ParamStore<F>, grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let params = store.trainable_params();
    let total: f64 = params
        .iter()
        .filter_map(|p| grads.param(p))
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = F::cast(max_norm / (total + 1e-6));
        for p in &params {
            if let Some(g) = grads.param_mut(p) {
                g.mapv_inplace(|v| v * s);
            }
        }
    }
    total
}

/// Cosine annealing from `lr0` at epoch 0 to `eta_min` at the last epoch.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64, eta_min: f64) -> f64 {
    if epochs <= 1 {
        return lr0;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
