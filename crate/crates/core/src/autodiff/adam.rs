//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamSet;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = |t: &Tensor| Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.numel()]);
        AdamState {
            config,
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }

    /// Applies one update in place and advances the step counter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![params.len()],
                right: vec![grads.len(), self.m.len()],
            });
        }
        for ((p, g), m) in params.tensors().iter().zip(grads).zip(&self.m) {
            if !p.same_shape(g) || !p.same_shape(m) {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = AdamConfig::default();
        assert_eq!(c.beta1, 0.95);
        assert_eq!(c.beta2, 0.999);
        assert_eq!(c.epsilon, 1e-8);
        assert_eq!(c.learning_rate, 1e-3);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = ParamSet::new();
        p.push("a", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            state.step(&mut p, &[Tensor::zeros(2, 2)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε).
        for g in [0.3, -2.0, 1e-3] {
            let mut p = single(1.0);
            let mut state = AdamState::new(&p, AdamConfig::default());
            state.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let moved = 1.0 - p.tensors()[0].item();
            let expected = 1e-3 * g / (g.abs() + 1e-8);
            assert!((moved - expected).abs() < 1e-15, "g={g}: {moved} vs {expected}");
        }
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let mut p = single(0.7);
            let mut state = AdamState::new(&p, AdamConfig::default());
            let mut traj = Vec::new();
            for i in 0..50 {
                let g = (i as f64 * 0.37).sin() + p.tensors()[0].item();
                state.step(&mut p, &[Tensor::scalar(g)]).unwrap();
                traj.push(p.tensors()[0].item().to_bits());
            }
            traj
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single(1.0);
        let mut state = AdamState::new(&p, AdamConfig::default());
        let err = state.step(&mut p, &[Tensor::zeros(1, 2)]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }
}
