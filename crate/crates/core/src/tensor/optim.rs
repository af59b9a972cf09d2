use serde::{Deserialize, Serialize};

use super::{round_f32, ParamStore, Precision};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.004,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of one [`ParamStore`], indexed by
/// [`ParamId`](super::ParamId).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub precision: Precision,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig, precision: Precision) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        AdamState {
            config,
            precision,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.m[index], &self.v[index])
    }

    /// Rebuilds state from saved moments; shapes must match the store.
    pub fn restore(
        store: &ParamStore,
        config: AdamConfig,
        precision: Precision,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step: u64,
    ) -> Result<Self> {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).numel()).collect();
        let ok = |buf: &Vec<Vec<f64>>| {
            buf.len() == sizes.len() && buf.iter().zip(&sizes).all(|(b, &n)| b.len() == n)
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::Format(
                "optimizer moments do not match parameter shapes".into(),
            ));
        }
        Ok(AdamState {
            config,
            precision,
            m,
            v,
            step,
        })
    }

    /// One bias-corrected Adam update over all trainable parameters, then
    /// clears gradients. A parameter whose gradient is identically zero is
    /// left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(
                "optimizer state built for another store".into(),
            ));
        }
        for id in store.ids() {
            if store.is_trainable(id) && store.get(id).grad().is_none() {
                return Err(Error::Contract(format!(
                    "trainable parameter {} has no gradient",
                    store.name(id)
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let round = self.precision == Precision::F32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let k = id.index();
            let tensor = store.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            tensor.set_grad(None);
            if grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for ((p, g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
                if round {
                    *mi = round_f32(*mi);
                    *vi = round_f32(*vi);
                    *p = round_f32(*p);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(x: f64) -> (ParamStore, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x));
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let (mut store, id) = scalar_store(0.5);
        let mut adam = AdamState::new(&store, AdamConfig::default(), Precision::F64);
        store.get_mut(id).set_grad(Some(vec![1.0]));
        adam.step(&mut store).unwrap();
        let moved = store.get(id).data()[0] - 0.5;
        assert!((moved + 0.004).abs() < 1e-9, "moved {moved}");
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn sign_is_always_opposite_gradient() {
        for g in [-3.0, -1e-3, 2e-4, 7.0] {
            let (mut store, id) = scalar_store(0.0);
            let mut adam = AdamState::new(&store, AdamConfig::default(), Precision::F64);
            for _ in 0..5 {
                store.get_mut(id).set_grad(Some(vec![g]));
                let before = store.get(id).data()[0];
                adam.step(&mut store).unwrap();
                let delta = store.get(id).data()[0] - before;
                assert!(delta * g < 0.0);
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut store, id) = scalar_store(1.25);
        let mut adam = AdamState::new(&store, AdamConfig::default(), Precision::F64);
        store.get_mut(id).set_grad(Some(vec![2.0]));
        adam.step(&mut store).unwrap();
        let after_one = store.get(id).data()[0];
        store.get_mut(id).set_grad(Some(vec![0.0]));
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(id).data()[0], after_one);
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let (mut store, _) = scalar_store(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default(), Precision::F64);
        assert!(matches!(adam.step(&mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameters_need_no_gradient() {
        let (mut store, id) = scalar_store(1.0);
        store.set_trainable(id, false);
        let mut adam = AdamState::new(&store, AdamConfig::default(), Precision::F64);
        adam.step(&mut store).unwrap();
        assert_eq!(store.get(id).data()[0], 1.0);
    }

    /// Independent scalar re-implementation of the update rule.
    fn reference_adam_on_square(x0: f64, steps: usize) -> Vec<f64> {
        let (lr, b1, b2, eps) = (0.004_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            x -= lr * mhat / (vhat.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn trajectory_on_square_matches_reference() {
        let expected = reference_adam_on_square(1.0, 10);
        let (mut store, id) = scalar_store(1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default(), Precision::F64);
        for want in expected {
            let x = store.get(id).data()[0];
            store.get_mut(id).set_grad(Some(vec![2.0 * x]));
            adam.step(&mut store).unwrap();
            assert!((store.get(id).data()[0] - want).abs() <= 1e-12);
        }
    }
}
