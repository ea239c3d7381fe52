use serde::{Deserialize, Serialize};

use super::{LinearGrads, LinearLayer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters and gradients", self.m.len()),
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Adam state for the weight and bias of a [`LinearLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdam {
    weight: AdamState,
    bias: AdamState,
}

impl LayerAdam {
    pub fn new(layer: &LinearLayer, config: AdamConfig) -> Self {
        Self {
            weight: AdamState::new(layer.weight().as_slice().len(), config),
            bias: AdamState::new(layer.bias().len(), config),
        }
    }

    pub fn step(&mut self, layer: &mut LinearLayer, grads: &LinearGrads) -> Result<()> {
        self.weight
            .step(layer.weight_mut().as_mut_slice(), grads.weight.as_slice())?;
        self.bias.step(layer.bias_mut(), &grads.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        state.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_is_learning_rate_sized() {
        let mut state = AdamState::new(1, AdamConfig::with_lr(0.1));
        let mut p = vec![0.0];
        state.step(&mut p, &[1.0]).unwrap();
        // m̂ = 1, v̂ = 1
        assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut state = AdamState::new(2, AdamConfig::with_lr(0.01));
        let mut p = vec![0.0, 0.0];
        let mut prev = p.clone();
        for _ in 0..200 {
            state.step(&mut p, &[2.5, -0.3]).unwrap();
            assert!(p[0] < prev[0]);
            assert!(p[1] > prev[1]);
            prev = p.clone();
        }
        assert_eq!(state.step_count(), 200);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new(2, AdamConfig::default());
        assert!(state.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert!(state.step(&mut [0.0; 2], &[0.0; 1]).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
