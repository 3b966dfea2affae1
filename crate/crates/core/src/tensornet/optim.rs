use serde::{Deserialize, Serialize};

use super::{Parameters, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn check_len(params: usize, grads: usize) -> Result<(), TensorError> {
    if params != grads {
        return Err(TensorError::Shape(format!(
            "{params} parameters but {grads} gradients"
        )));
    }
    Ok(())
}

/// `p <- p - lr * g`
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<(), TensorError> {
    check_len(params.len(), grads.len())?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// Bias-corrected Adam update with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    state: &mut AdamState,
) -> Result<(), TensorError> {
    check_len(params.len(), grads.len())?;
    check_len(params.len(), state.m.len())?;
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Training hyperparameters shared by every trainer in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerKind::Adam,
            dropout_rate: 0.0,
            rng_seed: 1,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.dropout_rate);
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidHyper(format!("{self:?}")))
        }
    }
}

/// Optimizer bound to one parameter set.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, state: AdamState },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                state: AdamState::new(n_params),
            },
        }
    }

    /// Applies one update; `grads` must share the layout of `params`.
    pub fn step(
        &mut self,
        params: &mut dyn Parameters,
        grads: &dyn Parameters,
    ) -> Result<(), TensorError> {
        let mut flat = params.flatten();
        let g = grads.flatten();
        match self {
            Optimizer::Sgd { lr } => sgd_step(&mut flat, &g, *lr)?,
            Optimizer::Adam { lr, state } => adam_step(&mut flat, &g, *lr, state)?,
        }
        params.assign_flat(&flat)
    }
}
