use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Reading of the configured decay coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `θ ← θ − lr·wd·θ` before every Adam update.
    #[default]
    Decoupled,
    /// Step size `lr / (1 + wd·t)` and no weight decay.
    LearningRate,
}

impl DecayMode {
    pub fn describe(self) -> &'static str {
        match self {
            DecayMode::Decoupled => "decay coefficient applied as decoupled weight decay (theta -= lr*wd*theta)",
            DecayMode::LearningRate => "decay coefficient applied as learning-rate decay (lr_t = lr / (1 + wd*t))",
        }
    }

    /// `(step size, weight decay)` for update number `step` (0-based).
    pub fn schedule(self, lr: f64, wd: f64, step: u64) -> (f64, f64) {
        match self {
            DecayMode::Decoupled => (lr, wd),
            DecayMode::LearningRate => (lr / (1.0 + wd * step as f64), 0.0),
        }
    }
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || m.len() != p.numel() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let data: Vec<f64> = p
            .data()
            .iter()
            .zip(g.data())
            .enumerate()
            .map(|(i, (&theta, &gi))| {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let decayed = theta - lr * weight_decay * theta;
                decayed - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps)
            })
            .collect();
        *p = Tensor::new(p.shape(), data)?;
    }
    Ok(())
}
