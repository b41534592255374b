use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    /// Decays every parameter.
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self::with_decay_filter(config, store, |_| true)
    }

    /// `decays(name)` decides per parameter whether weight decay applies.
    pub fn with_decay_filter(
        config: AdamWConfig,
        store: &ParamStore,
        decays: impl Fn(&str) -> bool,
    ) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            decay: store.iter().map(|(_, n, _)| decays(n)).collect(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, param: usize) -> &[f64] {
        &self.m[param]
    }

    pub fn second_moment(&self, param: usize) -> &[f64] {
        &self.v[param]
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if store.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!(
                    "{} parameters, {} gradients, state for {}",
                    store.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for id in store.ids() {
            let (p, g) = (store.get(id), grads.get(id));
            if p.shape() != g.shape() || p.len() != self.m[id.index()].len() {
                return Err(Error::shape(
                    "adamw",
                    format!("{}: {:?} vs gradient {:?}", store.name(id), p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let decay = if self.decay[i] { c.lr * c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                *p -= decay * *p;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
