//! AdamW and the warm-up + cosine learning-rate schedule.

use crate::autodiff::GradMap;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            warmup_epochs: 5,
            total_epochs: 150,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr < 0.0 || !self.base_lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::invalid("warmup_epochs exceeds total_epochs"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear ramp from 0 over the warm-up, then a
/// half cosine from `base_lr` down to 0 at the last epoch.
pub fn cosine_lr(epoch: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside 0..{}",
            cfg.total_epochs
        )));
    }
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(cfg.base_lr * epoch as f64 / w as f64);
    }
    let span = cfg.total_epochs - 1 - w;
    let progress = if span == 0 {
        0.0
    } else {
        (epoch - w) as f64 / span as f64
    };
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdamW step with decoupled weight decay. Parameters absent from
/// `grads` are left alone entirely.
pub fn adamw_step(store: &mut ParamStore, grads: &GradMap, cfg: &OptimizerConfig, lr: f64) -> Result<()> {
    let (b1, b2) = cfg.betas;
    for (name, g) in grads {
        let p = store
            .param_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::shape("adamw_step", format!("`{name}`")));
        }
        p.step += 1;
        let bc1 = 1.0 - b1.powi(p.step as i32);
        let bc2 = 1.0 - b2.powi(p.step as i32);
        let decay = lr * cfg.weight_decay;
        let w = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= decay * w[i];
            w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
