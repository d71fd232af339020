//! Adam with decoupled weight decay.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: first and second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Ok(AdamW {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.params() {
            if store.is_frozen(id) {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
            let k = id.index();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), g) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn quad_step(store: &mut ParamStore, opt: &mut AdamW) -> f64 {
        let id = store.find("x").unwrap();
        let tape = Tape::new();
        let x = tape.param(store, id);
        let loss = x.mul(x).unwrap().sum().unwrap();
        let v = loss.item().unwrap();
        let g = tape.backward(loss).unwrap();
        opt.step(store, &g).unwrap();
        v
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new([2], vec![1.5, -2.0]).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg).unwrap();
        let tape = Tape::new();
        let x = tape.param(&store, id);
        let g = tape.backward(x.scale(0.0).unwrap().sum().unwrap()).unwrap();
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.get(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_toward_minimum() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0));
        let mut opt = AdamW::new(&store, AdamWConfig::default()).unwrap();
        quad_step(&mut store, &mut opt);
        assert!(store.get(id).data()[0] < 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new([3], vec![1.0, -0.5, 0.25]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg).unwrap();
        let mut last = f64::MAX;
        for _ in 0..2000 {
            last = quad_step(&mut store, &mut opt);
            if last < 1e-6 {
                break;
            }
        }
        assert!(last < 1e-6, "loss {last}");
    }

    #[test]
    fn nonpositive_lr_rejected() {
        let store = ParamStore::new();
        assert!(AdamW::new(
            &store,
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            }
        )
        .is_err());
    }
}
