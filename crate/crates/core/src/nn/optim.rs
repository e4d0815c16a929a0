//! AdamW with decoupled weight decay.
//!
//! The decay term multiplies the parameter directly instead of being added to
//! the gradient, so it is unaffected by the adaptive second-moment scaling.

use crate::error::{Error, Result};
use crate::nn::tensor::{ParamId, ParamStore};

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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    params: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let first: Vec<Vec<f64>> = params.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        let second = first.clone();
        AdamW {
            config,
            params,
            first,
            second,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores state read back from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        let ok = first.len() == self.params.len()
            && second.len() == self.params.len()
            && first.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
            && second.iter().zip(&self.second).all(|(a, b)| a.len() == b.len());
        if !ok {
            return Err(Error::Checkpoint(
                "optimizer moment shapes do not match parameters".into(),
            ));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update from the gradients accumulated in `store`. Parameters
    /// without a gradient are treated as having a zero gradient. A NaN in
    /// any gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            if let Some(g) = store.get(id).grad() {
                if g.iter().any(|v| v.is_nan()) {
                    return Err(Error::OptimizerFault(format!("NaN gradient for {}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, &id) in self.params.iter().enumerate() {
            let tensor = store.get_mut(id);
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * weight_decay * *p;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self, store: &mut ParamStore) {
        for &id in &self.params {
            store.get_mut(id).zero_grad();
        }
    }
}
