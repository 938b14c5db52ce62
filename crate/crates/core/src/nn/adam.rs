use serde::{Deserialize, Serialize};

use super::{lit, Module, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update to the parameters of `module` from `grads` (same structure).
    pub fn step_module<M: Module<S>>(&mut self, module: &mut M, grads: &M) -> Result<()> {
        let grads: Vec<&[S]> = grads.params().into_iter().map(|p| p.data).collect();
        self.step(module.params_mut(), &grads)
    }

    pub fn step(&mut self, params: Vec<&mut [S]>, grads: &[&[S]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first.get(i).map(Vec::len) != Some(p.len()) {
                return Err(Error::ShapeMismatch(format!("parameter {i} size changed")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (lit::<S>(c.beta1), lit::<S>(c.beta2));
        let one = S::one();
        let correction1 = lit::<S>(1.0 - c.beta1.powi(self.step as i32));
        let correction2 = lit::<S>(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (lit::<S>(c.lr), lit::<S>(c.eps));
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
