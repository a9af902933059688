//! Adaptive moment estimation with decoupled weight decay, and the
//! warmup-then-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::kernel::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    /// One update. `decay[k]` selects which tensors receive weight decay.
    ///
    /// The decay is applied multiplicatively before the moment step, as
    /// `p ← p·(1 − lr·wd)`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], decay: &[bool], lr: f64, weight_decay: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for k in 0..params.len() {
            let shrink = if decay[k] { 1.0 - lr * weight_decay } else { 1.0 };
            let p = params[k].data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (j, &g) in grads[k].data().iter().enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] = p[j] * shrink - lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

/// Learning rate at `step` of a run with `total_steps` updates.
///
/// Ramps linearly from 0 to `base` over `warmup` steps, then decays
/// linearly to `base / 10`, reached at the final step `total_steps − 1`.
pub fn step_lr(step: usize, warmup: usize, total_steps: usize, base: f64) -> f64 {
    let floor = base / 10.0;
    let last = total_steps.saturating_sub(1);
    if total_steps > 1 && step >= last {
        return floor;
    }
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if last <= warmup {
        return base;
    }
    let frac = (step - warmup) as f64 / (last - warmup) as f64;
    base - (base - floor) * frac
}
