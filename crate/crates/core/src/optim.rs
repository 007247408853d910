//! Adam over the latent grid, the decaying L2 weight, and gradient masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LatentGrid, Tensor3};

pub const DEFAULT_LR: f64 = 0.15;
pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_ALPHA0: f64 = 0.5;
pub const DEFAULT_ALPHA_DECAY: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETAS.0,
            beta2: DEFAULT_BETAS.1,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub params: AdamParams,
    pub m: Tensor3,
    pub v: Tensor3,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: AdamParams, dims: (usize, usize, usize)) -> Self {
        Self {
            params,
            m: Tensor3::zeros(dims.0, dims.1, dims.2),
            v: Tensor3::zeros(dims.0, dims.1, dims.2),
            t: 0,
        }
    }

    /// Zeroes both moments and the step counter.
    pub fn reset(&mut self) {
        self.m.scale(0.0);
        self.v.scale(0.0);
        self.t = 0;
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(state: &mut AdamState, z: &mut LatentGrid, grad: &Tensor3) -> Result<()> {
    if !z.same_dims(grad) || !z.same_dims(&state.m) {
        return Err(Error::contract(format!(
            "adam shapes differ: z {:?}, grad {:?}, moments {:?}",
            z.dims(),
            grad.dims(),
            state.m.dims()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Diverged { stage: "gradient" });
    }
    let AdamParams { lr, beta1, beta2, eps } = state.params;
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((zi, &g), mi), vi) in z
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *zi -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// `alpha0·(1 − decay)^t`
    #[default]
    Multiplicative,
    /// `max(0, alpha0 − decay·t)`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegSchedule {
    pub alpha0: f64,
    pub decay: f64,
    pub mode: DecayMode,
}

impl Default for RegSchedule {
    fn default() -> Self {
        Self {
            alpha0: DEFAULT_ALPHA0,
            decay: DEFAULT_ALPHA_DECAY,
            mode: DecayMode::Multiplicative,
        }
    }
}

impl RegSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config("alpha0 must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::Config("alpha decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn alpha_at(schedule: &RegSchedule, t: u64) -> f64 {
    match schedule.mode {
        DecayMode::Multiplicative => {
            schedule.alpha0 * (1.0 - schedule.decay).powi(i32::try_from(t).unwrap_or(i32::MAX))
        }
        DecayMode::Linear => (schedule.alpha0 - schedule.decay * t as f64).max(0.0),
    }
}

/// Gradient of `alpha·mean(z²)`.
pub fn reg_gradient(z: &LatentGrid, alpha: f64) -> Tensor3 {
    let n = z.len().max(1) as f64;
    let s = 2.0 * alpha / n;
    z.map(|v| s * v)
}

/// Per-cell weights in `[0, 1]`; 0 freezes a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMask {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl LatentMask {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::contract(format!(
                "mask has {} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("mask values must lie in [0, 1]"));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn mask_gradients(grad: &mut Tensor3, mask: &LatentMask) -> Result<()> {
    if (grad.rows(), grad.cols()) != (mask.rows, mask.cols) {
        return Err(Error::contract(format!(
            "mask is {}x{}, gradient is {}x{}",
            mask.rows,
            mask.cols,
            grad.rows(),
            grad.cols()
        )));
    }
    for r in 0..mask.rows {
        for c in 0..mask.cols {
            let w = mask.get(r, c);
            for g in grad.cell_mut(r, c) {
                *g *= w;
            }
        }
    }
    Ok(())
}
