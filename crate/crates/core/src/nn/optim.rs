use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn adam(lr: f64) -> Self {
        UpdateRule::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments and step count. Unused by plain SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }
}

/// Applies one update in place.
pub fn optimizer_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, rule: UpdateRule) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths");
    match rule {
        UpdateRule::Sgd { lr } => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        UpdateRule::Adam {
            lr,
            beta1,
            beta2,
            eps,
        } => {
            if state.first.len() != params.len() {
                *state = OptimizerState::new(params.len());
            }
            state.step += 1;
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for i in 0..params.len() {
                let g = grads[i];
                state.first[i] = beta1 * state.first[i] + (1.0 - beta1) * g;
                state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * g * g;
                let m_hat = state.first[i] / c1;
                let v_hat = state.second[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
