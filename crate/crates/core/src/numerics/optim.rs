use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }

    pub fn restore(lr: f64, step_count: u64, m: BTreeMap<String, Vec<f64>>, v: BTreeMap<String, Vec<f64>>) -> Self {
        Self {
            step_count,
            m,
            v,
            ..Self::new(lr)
        }
    }

    pub(crate) fn state(&self) -> (&BTreeMap<String, Vec<f64>>, &BTreeMap<String, Vec<f64>>) {
        (&self.m, &self.v)
    }

    /// Rounds both moment buffers to `f32` precision.
    pub fn round_to_f32(&mut self) {
        for buf in self.m.values_mut().chain(self.v.values_mut()) {
            buf.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }

    /// Applies one update to every parameter, then clears the gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(name) = params.iter().find(|(_, t)| t.grad().is_none()).map(|(n, _)| n) {
            return Err(Error::contract(format!("parameter `{name}` has no gradient")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = p.grad().expect("checked above").to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            if m.len() != g.len() {
                return Err(Error::dim(format!("adam moments for `{name}` have the wrong length")));
            }
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if !p.is_finite() {
                return Err(Error::numeric(format!("adam update of `{name}`")));
            }
        }
        params.clear_grads();
        Ok(())
    }
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let g = p
                .grad()
                .ok_or_else(|| Error::contract(format!("parameter `{name}` has no gradient")))?
                .to_vec();
            let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, gi), vi) in p.data_mut().iter_mut().zip(&g).zip(vel.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
            if !p.is_finite() {
                return Err(Error::numeric(format!("sgd update of `{name}`")));
            }
        }
        params.clear_grads();
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for more than `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: f64,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: f64) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns the learning rate to use for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs as f64 > self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Init, Tensor};

    fn store_with_grad(values: &[f64], grad: &[f64]) -> ParamStore {
        let mut p = ParamStore::new(0);
        let mut t = Tensor::vector(values.to_vec()).unwrap();
        t.set_grad(grad.to_vec()).unwrap();
        p.insert("w", t);
        p
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = store_with_grad(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = Adam::new(0.001);
        adam.step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn one_step_matches_hand_rolled_update() {
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1; delta = lr / (1 + eps)
        let mut p = store_with_grad(&[0.5], &[1.0]);
        Adam::new(0.001).step(&mut p).unwrap();
        let expected = 0.5 - 0.001 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = ParamStore::new(0);
        p.declare("w", &[2], Init::Zeros).unwrap();
        assert!(matches!(Adam::new(0.1).step(&mut p), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = ParamStore::new(0);
        let mut adam = Adam::new(0.01);
        p.insert("a", Tensor::vector(vec![0.3]).unwrap());
        p.insert("b", Tensor::vector(vec![0.3]).unwrap());
        for k in 0..50 {
            let g = (k as f64 * 0.37).sin();
            p.get_mut("a").unwrap().set_grad(vec![g]).unwrap();
            p.get_mut("b").unwrap().set_grad(vec![g]).unwrap();
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.get("a").unwrap().data(), p.get("b").unwrap().data());
    }

    #[test]
    fn plateau_with_fractional_patience_decays_after_one_bad_epoch() {
        let mut sched = ReduceOnPlateau::new(0.2, 0.4);
        let lr = sched.observe(1.0, 0.1);
        assert_eq!(lr, 0.1);
        let lr = sched.observe(1.0, lr);
        assert!((lr - 0.02).abs() < 1e-15);
    }
}
