//! Bias-corrected Adam with global-norm gradient clipping and a linear
//! warmup followed by inverse-square-root learning-rate decay.

use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::TrainConfig;

/// First/second moment buffers aligned with the parameter order.
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.shapes().iter().map(|s| s.iter().product()).collect();
        OptimState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Learning-rate multiplier at optimizer step `t` (1-based).
pub fn lr_scale(t: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        let t = t as f64;
        let w = warmup as f64;
        (t / w).min((w / t).sqrt())
    }
}

/// One optimizer step over every parameter. Gradients are clipped so
/// their global norm stays at or below `grad_clip` before the update.
/// Non-finite gradients abort with the offending weight named.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} gradient arrays for {} parameters",
            grads.len(),
            state.m.len()
        )));
    }
    let mut sq_norm = 0.0;
    for (idx, g) in grads.iter().enumerate() {
        if g.len() != state.m[idx].len() {
            return Err(Error::Shape(format!(
                "gradient {idx} has {} values, parameter has {}",
                g.len(),
                state.m[idx].len()
            )));
        }
        for (j, &v) in g.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {v} at {}[{j}] on step {}",
                    params.names()[idx],
                    state.step + 1
                )));
            }
            sq_norm += v * v;
        }
    }
    let norm = sq_norm.sqrt();
    let clip_scale = if norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step;
    let lr_t = cfg.lr * lr_scale(t, cfg.warmup_steps);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for idx in 0..grads.len() {
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let w = params.data_mut(idx);
        for j in 0..w.len() {
            let g = grads[idx][j] * clip_scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= lr_t * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w[j]);
        }
    }
    params.step += 1;
    Ok(())
}
