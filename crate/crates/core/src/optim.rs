//! AdamW with a cosine-annealed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Cosine annealing from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`; parameters absent from `grads` are untouched.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t): (T, T) = (T::from_f64c(b1), T::from_f64c(b2));
        let eps = T::from_f64c(self.cfg.eps);
        let step_size = T::from_f64c(lr / bc1);
        let bc2_sqrt = T::from_f64c(bc2.sqrt());
        let decay = T::from_f64c(1.0 - lr * self.cfg.weight_decay);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
            });
            // Decay matrices and embeddings; leave biases and norm vectors alone.
            let apply_decay = p.shape().len() >= 2;
            for (((w, &gv), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1t * *m + (T::one() - b1t) * gv;
                *v = b2t * *v + (T::one() - b2t) * gv * gv;
                if apply_decay {
                    *w *= decay;
                }
                *w -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut params = ModelParams::<f64>::new();
        params.insert("w", Tensor::from_f64(&[2], &[3.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let w = params.get("w").unwrap().clone();
            let mut g = BTreeMap::new();
            g.insert("w".to_string(), w.map(|x| 2.0 * x));
            opt.step(&mut params, &g, 0.05);
        }
        assert!(params.get("w").unwrap().data().iter().all(|x| x.abs() < 1e-2));
    }
}
