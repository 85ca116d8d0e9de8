use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled (AdamW) decay when true, L2 added to the gradient otherwise.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
        }
    }
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            decoupled: false,
            ..Self::default()
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

/// Moment accumulators for every parameter of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = |_: &_| params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(&()),
            second: zeros(&()),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step_with_lr(params, self.config.lr);
    }

    /// One update at learning rate `lr`.
    ///
    /// Decoupled decay shrinks each parameter by `weight_decay * p` independently
    /// of `lr`; the moment update then moves it by `lr * m_hat / (sqrt(v_hat) + eps)`.
    /// Parameters without `requires_grad` or without a gradient are left alone.
    pub fn step_with_lr(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            if !t.requires_grad {
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            debug_assert_eq!(m.len(), t.numel());
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let mut g = grad[j];
                if c.decoupled {
                    *p -= c.weight_decay * *p;
                } else {
                    g += c.weight_decay * *p;
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            t.grad = Some(grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn quadratic_grad(store: &mut ParamStore, w: crate::numerics::ParamId) -> f64 {
        // f(x, y) = (x - 3)^2 + 2 (y + 1)^2 + x y, minimiser solves
        // 2(x-3) + y = 0, 4(y+1) + x = 0  ->  x = 28/7, y = -2
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let p = g.value(b[w]).to_vec();
        let loss = (p[0] - 3.0).powi(2) + 2.0 * (p[1] + 1.0).powi(2) + p[0] * p[1];
        store.get_mut(w).grad = Some(vec![2.0 * (p[0] - 3.0) + p[1], 4.0 * (p[1] + 1.0) + p[0]]);
        loss
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let before = store.clone();
        let mut state = AdamState::new(AdamConfig::adamw(0.1, 0.0), &store);
        store.get_mut(w).grad = Some(vec![0.0; 3]);
        state.step(&mut store);
        assert_eq!(store.get(w).data(), before.get(w).data());
    }

    #[test]
    fn lr_zero_moves_only_through_decay() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap().with_grad());
        let mut state = AdamState::new(AdamConfig::adamw(0.0, 0.1), &store);
        store.get_mut(w).grad = Some(vec![5.0, -7.0]);
        state.step(&mut store);
        assert_eq!(store.get(w).data(), &[0.9, -1.8]);

        let mut state = AdamState::new(AdamConfig::adamw(0.0, 0.0), &store);
        let before = store.get(w).data().to_vec();
        store.get_mut(w).grad = Some(vec![5.0, -7.0]);
        state.step(&mut store);
        assert_eq!(store.get(w).data(), &before[..]);
    }

    #[test]
    fn single_step_descends_on_square() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0).with_grad());
        let mut state = AdamState::new(AdamConfig::adamw(0.1, 0.0), &store);
        store.get_mut(w).grad = Some(vec![2.0]);
        state.step(&mut store);
        assert!(store.get(w).data()[0] < 1.0);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn reaches_quadratic_minimiser() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[2], vec![0.0, 0.0]).unwrap().with_grad());
        let mut state = AdamState::new(AdamConfig::adamw(0.2, 0.0), &store);
        for step in 0..200 {
            quadratic_grad(&mut store, w);
            // decay the step size so Adam settles instead of oscillating
            let lr = 0.2 * (1.0 - step as f64 / 200.0);
            state.step_with_lr(&mut store, lr);
        }
        let p = store.get(w).data();
        assert!((p[0] - 4.0).abs() < 1e-3, "x = {}", p[0]);
        assert!((p[1] + 2.0).abs() < 1e-3, "y = {}", p[1]);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0));
        store.get_mut(w).grad = Some(vec![1.0]);
        let mut state = AdamState::new(AdamConfig::adamw(0.1, 0.1), &store);
        state.step(&mut store);
        assert_eq!(store.get(w).data(), &[1.0]);
    }
}
