//! AdamW with decoupled weight decay, plus global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "adamw betas must lie in [0, 1), got {} / {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("adamw eps must be positive, got {}", self.eps)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "adamw weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First and second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update over `params`, reading each tensor's `grad` buffer.
///
/// Decoupled decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p),
/// with bias-corrected moments and the decay term using the pre-update p.
pub fn adamw_step(
    params: &mut [Tensor],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    cfg.validate()?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return Err(Error::Usage("optimizer state does not match parameter layout".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (pi, p) in params.iter_mut().enumerate() {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("parameter {pi} has no gradient buffer")))?
            .clone();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {pi}")));
        }
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * data[i]);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm does not exceed `max_norm`.
/// Returns the applied scale (1.0 when already within bounds).
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) || !max_norm.is_finite() {
        return Err(Error::Config(format!("clip norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0;
    for g in grads.iter() {
        for &v in g.iter() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok(scale)
}

/// Clips the `grad` buffers of a parameter set in place.
pub fn clip_param_grads(params: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let mut views: Vec<&mut [f64]> = params
        .iter_mut()
        .filter_map(|p| p.grad.as_deref_mut())
        .collect();
    clip_global_norm(&mut views, max_norm)
}
