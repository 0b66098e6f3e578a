//! Adam with global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let Some(p) = store.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gc = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gc;
                *vi = b2 * *vi + (1.0 - b2) * gc * gc;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grads(store: &ParamStore) -> BTreeMap<String, Tensor> {
        // d/dx of sum((x - 3)^2)
        let x = store.get("x").unwrap();
        BTreeMap::from([("x".to_string(), x.map(|v| 2.0 * (v - 3.0)))])
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![3], vec![0.1, -2.0, 7.5]));
        let before = store.clone();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            ..Default::default()
        });
        for _ in 0..50 {
            let g = quadratic_grads(&store);
            opt.step(&mut store, &g);
        }
        assert_eq!(store, before);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![0.0, 10.0]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            let g = quadratic_grads(&store);
            opt.step(&mut store, &g);
        }
        for v in store.get("x").unwrap().data() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::scalar(1.0));
        store.insert("hd.w", Tensor::scalar(1.0));
        store.freeze("enc.");
        let grads = BTreeMap::from([
            ("enc.w".to_string(), Tensor::scalar(1.0)),
            ("hd.w".to_string(), Tensor::scalar(1.0)),
        ]);
        Adam::new(AdamConfig::default()).step(&mut store, &grads);
        assert_eq!(store.get("enc.w").unwrap().item(), 1.0);
        assert!(store.get("hd.w").unwrap().item() < 1.0);
    }
}
