use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::params::ParamSet;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |field: &str, ok: bool, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, reason))
            }
        };
        check("optimizer.lr", self.lr.is_finite() && self.lr >= 0.0, "must be finite and >= 0")?;
        check("optimizer.beta1", (0.0..1.0).contains(&self.beta1), "must lie in [0, 1)")?;
        check("optimizer.beta2", (0.0..1.0).contains(&self.beta2), "must lie in [0, 1)")?;
        check("optimizer.eps", self.eps > 0.0, "must be > 0")?;
        check(
            "optimizer.weight_decay",
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "must be finite and >= 0",
        )
    }
}

/// Moment accumulators for decoupled-weight-decay Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl OptimState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        OptimState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &Matrix {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Matrix {
        &self.second[index]
    }
}

/// One AdamW update over the trainable parameters.
///
/// `grads[i]` pairs with parameter `i`. Frozen parameters are neither
/// decayed nor moved, and their moments are left untouched.
pub fn adamw_step(params: &mut ParamSet, grads: &[Matrix], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::shape("adamw_step", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} {:?}", p.name, p.value.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }

    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *theta *= decay;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::params::ParamTag;

    fn scalar_params(theta: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", ParamTag::Head, Matrix::scalar(theta)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut params = scalar_params(0.37);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimState::new(&params, cfg);
        for _ in 0..5 {
            adamw_step(&mut params, &[Matrix::scalar(0.0)], &mut state).unwrap();
        }
        assert_eq!(params.value(0).item(), 0.37);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn zero_gradient_decay_only() {
        let mut params = scalar_params(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut state = OptimState::new(&params, cfg);
        adamw_step(&mut params, &[Matrix::scalar(0.0)], &mut state).unwrap();
        assert!((params.value(0).item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut params = scalar_params(0.5);
        let cfg = AdamWConfig {
            lr: 0.001,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimState::new(&params, cfg);
        adamw_step(&mut params, &[Matrix::scalar(2.0)], &mut state).unwrap();
        let expected = 0.5 - 0.001 * 2.0 / (2.0 + 1e-8);
        assert!((params.value(0).item() - expected).abs() < 1e-15);
        assert!(((0.5 - params.value(0).item()) - 0.001).abs() < 1e-11);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut params = ParamSet::new();
        params.insert("a", ParamTag::Backbone, Matrix::filled(2, 2, 1.0)).unwrap();
        params.insert("b", ParamTag::Head, Matrix::filled(1, 2, 1.0)).unwrap();
        params.set_trainable_flags(&[false, true]).unwrap();
        let mut state = OptimState::new(&params, AdamWConfig::default());
        let grads = [Matrix::filled(2, 2, 3.0), Matrix::filled(1, 2, 3.0)];
        for _ in 0..10 {
            adamw_step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params.value(0), &Matrix::filled(2, 2, 1.0));
        assert!(params.value(1).data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = scalar_params(1.0);
        let mut state = OptimState::new(&params, AdamWConfig::default());
        assert!(adamw_step(&mut params, &[Matrix::zeros(2, 1)], &mut state).is_err());
        assert!(adamw_step(&mut params, &[], &mut state).is_err());
    }
}
