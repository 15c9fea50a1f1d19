use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

/// First and second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update. `t` counts steps from 1.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    t: u64,
    hp: &AdamParams,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let c1 = (1.0 - (hp.beta1 as f64).powf(t as f64)) as f32;
    let c2 = (1.0 - (hp.beta2 as f64).powf(t as f64)) as f32;
    for i in 0..params.len() {
        let g = grads[i];
        let m = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= hp.lr * (m / c1) / ((v / c2).sqrt() + hp.eps);
    }
    Ok(())
}
