use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamSlot;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(slots: &[ParamSlot]) -> Self {
        AdamState {
            step: 0,
            m: slots.iter().map(|s| vec![0.0; s.len()]).collect(),
            v: slots.iter().map(|s| vec![0.0; s.len()]).collect(),
        }
    }
}

/// One Adam update with constant learning rate. Nothing is written if any
/// gradient entry is non-finite.
pub fn optimizer_step(slots: &mut [ParamSlot], lr: f64, state: &mut AdamState) -> Result<()> {
    if state.m.len() != slots.len() || state.v.len() != slots.len() {
        return Err(Error::shape("optimizer_step slots", slots.len(), state.m.len()));
    }
    for (slot, m) in slots.iter().zip(&state.m) {
        if m.len() != slot.len() {
            return Err(Error::shape("optimizer_step moments", slot.len(), m.len()));
        }
        if !slot.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", slot.name)));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for ((slot, m), v) in slots.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = slot.grad.data().to_vec();
        for (((p, g), mi), vi) in slot.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * g;
            *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
