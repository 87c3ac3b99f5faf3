use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{ensure, Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Argument,
            "learning rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Argument,
            "betas must lie in [0, 1)"
        );
        ensure!(self.epsilon > 0.0, Argument, "epsilon must be positive");
        ensure!(self.weight_decay >= 0.0, Argument, "weight decay must be >= 0");
        ensure!(self.clip_norm > 0.0, Argument, "clip norm must be positive");
        Ok(())
    }
}

/// Moment accumulators for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub hyper: AdamWConfig,
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize, hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn for_param(param: &Matrix, hyper: AdamWConfig) -> Self {
        Self::new(param.rows(), param.cols(), hyper)
    }
}

/// Joint L2 norm over several gradient matrices.
pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    ensure!(norm.is_finite(), Numeric, "non-finite gradient norm");
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

fn check_pair(param: &Matrix, grad: &Matrix, state: &AdamWState) -> Result<()> {
    ensure!(
        param.shape() == grad.shape(),
        Argument,
        "gradient shape {:?} does not match parameter {:?}",
        grad.shape(),
        param.shape()
    );
    ensure!(
        state.m.shape() == param.shape(),
        Argument,
        "optimizer state shape {:?} belongs to a different parameter {:?}",
        state.m.shape(),
        param.shape()
    );
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(())
}

/// Bias-corrected AdamW update with decoupled weight decay, no clipping.
fn apply(param: &mut Matrix, grad: &Matrix, state: &mut AdamWState) {
    let h = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    let decay = 1.0 - h.learning_rate * h.weight_decay;
    let p = param.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, &g), m), v) in p.iter_mut().zip(grad.as_slice()).zip(m).zip(v) {
        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
    }
}

/// One AdamW step on a single parameter, clipping its gradient to
/// `state.hyper.clip_norm` first.
pub fn adamw_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamWState) -> Result<()> {
    check_pair(param, grad, state)?;
    let mut g = [grad.clone()];
    clip_global_norm(&mut g, state.hyper.clip_norm)?;
    apply(param, &g[0], state);
    Ok(())
}

/// AdamW over a fixed set of parameters that are clipped jointly.
#[derive(Clone, Debug)]
pub struct AdamW {
    hyper: AdamWConfig,
    states: Vec<AdamWState>,
}

impl AdamW {
    pub fn new(params: &[&Matrix], hyper: AdamWConfig) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            hyper,
            states: params.iter().map(|p| AdamWState::for_param(p, hyper)).collect(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.hyper
    }

    pub fn states(&self) -> &[AdamWState] {
        &self.states
    }

    /// Clips `grads` by their joint norm, then updates each parameter.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [&mut Matrix], mut grads: Vec<Matrix>) -> Result<f64> {
        ensure!(
            params.len() == self.states.len() && grads.len() == self.states.len(),
            Argument,
            "optimizer tracks {} parameters, got {} params / {} grads",
            self.states.len(),
            params.len(),
            grads.len()
        );
        for ((p, g), s) in params.iter().zip(&grads).zip(&self.states) {
            check_pair(p, g, s)?;
        }
        let norm = clip_global_norm(&mut grads, self.hyper.clip_norm)?;
        for ((p, g), s) in params.iter_mut().zip(&grads).zip(self.states.iter_mut()) {
            apply(p, g, s);
        }
        Ok(norm)
    }
}
