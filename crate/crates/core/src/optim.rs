//! AdamW with decoupled weight decay, and a warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments per parameter tensor, in visiting order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Params>(params: &P) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(vec![0.0; t.numel()]));
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One AdamW update: `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step<P: Params>(
    params: &mut P,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::dim("adamw_step", &[grads.len()], &[state.m.len()]));
    }
    let mut shapes_ok = true;
    let mut idx = 0;
    params.visit(&mut |_, t| {
        shapes_ok &= grads.get(idx).is_some_and(|g| g.shape() == t.shape());
        idx += 1;
    });
    if !shapes_ok {
        return Err(Error::Contract(
            "gradient shapes do not match parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut idx = 0;
    params.visit_mut(&mut |p| {
        let g = grads[idx].data();
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let mut data = p.data().to_vec();
        for j in 0..data.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            data[j] = data[j] - lr * weight_decay * data[j] - lr * mhat / (vhat.sqrt() + EPSILON);
        }
        *p = Tensor::new(p.shape(), data)
            .expect("same shape")
            .into_parameter();
        idx += 1;
    });
    Ok(())
}

/// Linear warmup over the first `warmup` steps, then half-cosine decay
/// from `base_lr` at step `warmup` to zero at step `total`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64, warmup: usize) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup || step >= total {
        return if step >= total { 0.0 } else { base_lr };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(10, 110, 1e-3, 10), 1e-3);
        assert_eq!(cosine_lr(110, 110, 1e-3, 10), 0.0);
        assert!((cosine_lr(60, 110, 1e-3, 10) - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(0, 110, 1e-3, 10) < 1e-3);
    }
}
