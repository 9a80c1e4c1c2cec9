//! Adaptive moment estimation with decoupled weight decay.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::Param(alloc::format!(
                "learning rate must be positive and weight decay non-negative, got {lr} and {weight_decay}"
            )));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every non-frozen parameter that received a gradient.
    /// Decay applies only to parameters flagged for it (weights, not biases or gains).
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite(id.index()));
        }
        self.steps += 1;
        let t = self.steps as f64;
        let c1 = 1.0 - math::powf(self.beta1, t);
        let c2 = 1.0 - math::powf(self.beta2, t);
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.param_mut(id);
            if p.frozen {
                continue;
            }
            if p.value.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                let mj = &mut m.data_mut()[j];
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                let vj = &mut v.data_mut()[j];
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let update = (m.data()[j] / c1) / (math::sqrt(v.data()[j] / c2) + self.eps);
                w[j] -= self.lr * (update + decay * w[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let a = store.register("w", Tensor::from_rows(&[[1.0, -2.0]]).unwrap(), false, false);
        let mut grads = ParamGrads::new(1);
        grads.accumulate(a, &Tensor::from_rows(&[[0.5, -3.0]]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0).unwrap();
        opt.step(&mut store, &grads).unwrap();
        let w = store.value(a).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_on_flagged_trainable_params() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::filled(1, 1, 1.0), false, true);
        let b = store.register("b", Tensor::filled(1, 1, 1.0), false, false);
        let f = store.register("f", Tensor::filled(1, 1, 1.0), true, true);
        let mut grads = ParamGrads::new(3);
        for id in [w, b, f] {
            grads.accumulate(id, &Tensor::zeros(1, 1));
        }
        let mut opt = AdamW::new(0.1, 0.5).unwrap();
        opt.step(&mut store, &grads).unwrap();
        assert!((store.value(w).data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(store.value(b).data()[0], 1.0);
        assert_eq!(store.value(f).data()[0], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let a = store.register("x", Tensor::filled(1, 1, 4.0), false, false);
        let mut opt = AdamW::new(0.05, 0.0).unwrap();
        for _ in 0..2000 {
            let x = store.value(a).data()[0];
            let mut grads = ParamGrads::new(1);
            grads.accumulate(a, &Tensor::filled(1, 1, 2.0 * (x - 1.5)));
            opt.step(&mut store, &grads).unwrap();
        }
        assert!((store.value(a).data()[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamW::new(0.0, 0.0).is_err());
        assert!(AdamW::new(1e-3, -1.0).is_err());
    }
}
