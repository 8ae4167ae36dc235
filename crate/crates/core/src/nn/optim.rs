use std::collections::HashMap;

use ndarray::{Array2, Zip};

use super::params::{Gradients, ParamKey, ParamStore};
use super::tape::Matrix;

/// AdamW hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients with a larger global norm are rescaled; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter key.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: HashMap<ParamKey, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter of `store` that has a
    /// gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let clip = match self.cfg.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let keys: Vec<ParamKey> = store.keys().collect();
        for key in keys {
            if !store.is_trainable(key) {
                continue;
            }
            let Some(g) = grads.get(key) else { continue };
            let (m, v) = self.moments.entry(key).or_insert_with(|| {
                let shape = g.dim();
                (Array2::zeros(shape), Array2::zeros(shape))
            });
            let decay = 1.0 - lr * self.cfg.weight_decay;
            let eps = self.cfg.eps;
            Zip::from(store.value_mut(key))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, g| {
                    let g = g * clip;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p = *p * decay - lr * update;
                });
        }
    }
}

/// Learning rate that is multiplied by `factor` at each milestone epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    /// Learning rate during one-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|m| epoch >= **m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, Tape};

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let mut store = ParamStore::new();
        let k = store.add_filled("w", ParamGroup::Backbone, (2, 2), 0.37);
        let before = store.to_bytes();
        let mut tape = Tape::new();
        let w = tape.param(&store, k);
        let sq = tape.mul(w, w);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store.to_bytes(), before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let k = store.add_filled("w", ParamGroup::Backbone, (1, 3), 2.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let w = tape.param(&store, k);
            let c = tape.add_scalar(w, -0.5);
            let sq = tape.mul(c, c);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss);
            opt.step(&mut store, &grads, 0.01);
        }
        for v in store.value(k).iter() {
            assert!((v - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn step_schedule_halves_at_milestone() {
        let s = StepSchedule {
            base_lr: 2e-4,
            milestones: vec![3],
            factor: 0.5,
        };
        assert_eq!(s.lr_at(1), 2e-4);
        assert_eq!(s.lr_at(2), 2e-4);
        assert_eq!(s.lr_at(3), 1e-4);
        assert_eq!(s.lr_at(5), 1e-4);
    }
}
