use serde::{Deserialize, Serialize};

use crate::nn::{Grads, ParamStore};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment estimates for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub(crate) step: u64,
    pub(crate) first: Vec<Vec<f64>>,
    pub(crate) second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.tensors())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;

    #[test]
    fn first_step_moves_each_weight_by_learning_rate() {
        let mut store = ParamStore::new();
        store.push("w".into(), vec![3], vec![1.0, -2.0, 0.5]);
        let mut grads = store.zeros_like();
        grads.data[0] = vec![0.3, -4.0, 1e-3];
        let cfg = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-12,
        };
        let mut adam = Adam::new(&store);
        adam.update(&cfg, &mut store, &grads);
        let w = &store.iter().next().unwrap().data;
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert!((w[2] - 0.49).abs() < 1e-9);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0, 1.0);
        store.push("w".into(), vec![4], init.normal(4));
        let before = store.clone();
        let grads = store.zeros_like();
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        };
        Adam::new(&store).update(&cfg, &mut store, &grads);
        assert_eq!(store, before);
    }
}
