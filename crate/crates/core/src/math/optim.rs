use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adaptive-moment (or plain gradient descent) state for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub first_moments: Vec<Matrix>,
    pub second_moments: Vec<Matrix>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.learning_rate)));
        }
        let zeros: Vec<Matrix> =
            store.groups().iter().map(|g| Matrix::zeros(g.value.rows(), g.value.cols())).collect();
        Ok(Self { config, first_moments: zeros.clone(), second_moments: zeros, step_count: 0 })
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Parameters are untouched if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first_moments.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} groups, store has {}",
                self.first_moments.len(),
                store.len()
            )));
        }
        for g in store.groups() {
            if let Some(bad) = g.grad.as_slice().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric { param: g.name.clone(), detail: format!("gradient entry {bad}") });
            }
        }
        self.step_count += 1;
        let OptimizerConfig { kind, learning_rate: lr, beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (i, group) in store.groups_mut().iter_mut().enumerate() {
            match kind {
                OptimizerKind::Sgd => {
                    for (v, g) in group.value.as_mut_slice().iter_mut().zip(group.grad.as_slice()) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first_moments[i].as_mut_slice();
                    let s = self.second_moments[i].as_mut_slice();
                    let values = group.value.as_mut_slice();
                    for (((v, g), m), s) in values.iter_mut().zip(group.grad.as_slice()).zip(m).zip(s) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *s = beta2 * *s + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let s_hat = *s / c2;
                        *v -= lr * m_hat / (s_hat.sqrt() + epsilon);
                    }
                }
            }
            group.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::row_vector(&[1.0, -2.0]));
        store.groups_mut()[0].grad = Matrix::row_vector(&[0.5, -3.0]);
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &store).unwrap();
        opt.step(&mut store).unwrap();
        let v = store.value(id).as_slice();
        assert!((v[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(store.groups()[0].grad.as_slice(), &[0.0, 0.0]);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn sgd_switch() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::row_vector(&[1.0]));
        store.groups_mut()[0].grad = Matrix::row_vector(&[2.0]);
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 0.1, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &store).unwrap();
        opt.step(&mut store).unwrap();
        assert!((store.groups()[0].value.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("decoder.w0", Matrix::row_vector(&[1.0]));
        store.groups_mut()[0].grad = Matrix::row_vector(&[f64::NAN]);
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &store).unwrap();
        let err = opt.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("decoder.w0"));
        assert_eq!(store.groups()[0].value.get(0, 0), 1.0);
    }
}
