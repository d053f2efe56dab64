use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// ×0.1 after one third of the epochs and again after two thirds.
    StepWise,
    /// `½(1 + cos(π·epoch/epochs))`.
    Cosine,
}

impl Schedule {
    /// Learning-rate multiplier at zero-based `epoch` out of `total`.
    pub fn factor(self, epoch: usize, total: usize) -> f64 {
        if total == 0 {
            return 1.0;
        }
        match self {
            Schedule::Constant => 1.0,
            Schedule::StepWise => {
                let mut f = 1.0;
                if 3 * epoch >= total {
                    f *= 0.1;
                }
                if 3 * epoch >= 2 * total {
                    f *= 0.1;
                }
                f
            }
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid_config("lr", "must be a positive number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid_config("weight_decay", "must be a nonnegative number"));
        }
        Ok(())
    }
}

/// AdamW state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    /// Epoch count the schedule spans.
    pub total_epochs: usize,
    /// Current zero-based epoch.
    pub epoch: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: usize, total_epochs: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![0.0; params],
            second: vec![0.0; params],
            total_epochs,
            epoch: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.epoch, self.total_epochs)
    }
}

/// One bias-corrected Adam update followed by decoupled weight decay
/// `params ← params·(1 − lr·wd)`.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer holds {} moments, got {} params and {} grads",
            state.first.len(),
            params.len(),
            grads.len()
        )));
    }
    state.step += 1;
    let lr = state.learning_rate();
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let decay = 1.0 - lr * state.config.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = BETA1 * state.first[i] + (1.0 - BETA1) * g;
        state.second[i] = BETA2 * state.second[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.first[i] / c1;
        let v_hat = state.second[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        params[i] *= decay;
    }
    Ok(())
}
