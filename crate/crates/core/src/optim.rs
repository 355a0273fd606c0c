//! Ranger: RAdam with LookAhead slow weights and gradient centralization,
//! plus a step learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::model::tensor::{Real, Tensor, TensorMap};
use crate::{Error, Result};

/// Threshold on the SMA length above which the adaptive step is used.
pub const RECTIFY_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fast steps between LookAhead syncs; `usize::MAX` effectively disables it.
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub gc_enabled: bool,
    /// Decoupled: `theta -= lr * weight_decay * theta` before the adaptive step.
    pub weight_decay: f64,
    /// `(milestone, multiplier)`: the multiplier applies to steps after the milestone.
    pub step_decay: Vec<(u64, f64)>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
            gc_enabled: true,
            weight_decay: 0.0,
            step_decay: Vec::new(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.lookahead_k == 0 {
            return bad("lookahead_k must be positive");
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return bad("lookahead_alpha must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.step_decay.iter().any(|&(_, m)| !(m > 0.0 && m <= 1.0)) {
            return bad("decay multipliers must lie in (0, 1]");
        }
        Ok(())
    }

    /// Learning rate used at step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        self.step_decay.iter().filter(|&&(s, _)| t > s).fold(self.lr, |lr, &(_, m)| lr * m)
    }
}

/// Maximum length of the approximated simple moving average.
pub fn rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

pub fn rho_t(beta2: f64, t: u64) -> f64 {
    let b = libm::pow(beta2, t as f64);
    rho_inf(beta2) - 2.0 * t as f64 * b / (1.0 - b)
}

/// Variance rectification factor, or `None` when the momentum-only step applies.
pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
    let (ri, rt) = (rho_inf(beta2), rho_t(beta2, t));
    (rt > RECTIFY_THRESHOLD).then(|| libm::sqrt((rt - 4.0) * (rt - 2.0) * ri / ((ri - 4.0) * (ri - 2.0) * rt)))
}

/// Subtracts from every output-channel slice (axis 0) its mean. Tensors of
/// rank below 2 are left alone.
pub fn centralize_gradient<T: Real>(g: &mut Tensor<T>) {
    if g.rank() < 2 || g.is_empty() {
        return;
    }
    let (rows, cols) = g.as_mat_dims();
    let n = T::from_f64(cols as f64);
    for r in 0..rows {
        let slice = &mut g.data[r * cols..(r + 1) * cols];
        let mean = slice.iter().copied().sum::<T>() / n;
        slice.iter_mut().for_each(|v| *v -= mean);
    }
}

/// Moments, slow weights and the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Real> {
    pub t: u64,
    pub m: TensorMap<T>,
    pub v: TensorMap<T>,
    pub slow: TensorMap<T>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &TensorMap<T>) -> Self {
        let zeros = || params.iter().map(|(k, p)| (k.clone(), Tensor::zeros(&p.shape))).collect();
        Self { t: 0, m: zeros(), v: zeros(), slow: params.clone() }
    }

    /// Checks that every map is keyed and shaped like `params`.
    pub fn check_against(&self, params: &TensorMap<T>) -> Result<()> {
        for (label, map) in [("m", &self.m), ("v", &self.v), ("slow", &self.slow)] {
            if map.len() != params.len() {
                return Err(Error::KeyMismatch(format!("optimizer {label} has {} entries, model {}", map.len(), params.len())));
            }
            for (k, p) in params {
                match map.get(k) {
                    Some(s) if s.shape == p.shape => {}
                    _ => return Err(Error::KeyMismatch(format!("optimizer {label} entry {k} missing or misshapen"))),
                }
            }
        }
        Ok(())
    }
}

/// One RAdam update of a single parameter at the state's current `t`.
pub fn radam_step<T: Real>(
    state: &mut OptimState<T>,
    config: &OptimConfig,
    name: &str,
    param: &mut Tensor<T>,
    g: &Tensor<T>,
    lr: f64,
) -> Result<()> {
    if state.t == 0 {
        return Err(Error::Config("radam_step called before the step counter was advanced".into()));
    }
    if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} at index {i}")));
    }
    let m = state.m.get_mut(name).ok_or_else(|| Error::KeyMismatch(format!("no first moment for {name}")))?;
    let v = state.v.get_mut(name).ok_or_else(|| Error::KeyMismatch(format!("no second moment for {name}")))?;
    let t = state.t as f64;
    let (b1, b2) = (T::from_f64(config.beta1), T::from_f64(config.beta2));
    let (c1, c2) = (T::from_f64(1.0 - config.beta1), T::from_f64(1.0 - config.beta2));
    for ((mi, vi), &gi) in m.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
        *mi = b1 * *mi + c1 * gi;
        *vi = b2 * *vi + c2 * gi * gi;
    }
    let bc1 = 1.0 - libm::pow(config.beta1, t);
    let bc2 = 1.0 - libm::pow(config.beta2, t);
    match rectification(config.beta2, state.t) {
        Some(r) => {
            let step = T::from_f64(lr * r / bc1);
            let sqrt_bc2 = T::from_f64(libm::sqrt(bc2));
            let eps = T::from_f64(config.eps);
            for ((p, &mi), &vi) in param.data.iter_mut().zip(&m.data).zip(&v.data) {
                *p -= step * mi / (vi.sqrt() / sqrt_bc2 + eps);
            }
        }
        None => {
            let step = T::from_f64(lr / bc1);
            for (p, &mi) in param.data.iter_mut().zip(&m.data) {
                *p -= step * mi;
            }
        }
    }
    if let Some(i) = param.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("update of {name} at index {i}")));
    }
    Ok(())
}

/// `slow += alpha * (fast - slow); fast = slow` for every parameter.
pub fn lookahead_sync<T: Real>(state: &mut OptimState<T>, config: &OptimConfig, params: &mut TensorMap<T>) {
    let alpha = T::from_f64(config.lookahead_alpha);
    for (name, fast) in params.iter_mut() {
        let Some(slow) = state.slow.get_mut(name) else { continue };
        if config.lookahead_alpha == 1.0 {
            slow.data.copy_from_slice(&fast.data);
            continue;
        }
        for (s, f) in slow.data.iter_mut().zip(fast.data.iter_mut()) {
            *s += alpha * (*f - *s);
            *f = *s;
        }
    }
}

/// One full Ranger step over all parameters.
pub fn step<T: Real>(
    state: &mut OptimState<T>,
    params: &mut TensorMap<T>,
    grads: &TensorMap<T>,
    config: &OptimConfig,
) -> Result<()> {
    if grads.len() != params.len() || grads.keys().zip(params.keys()).any(|(a, b)| a != b) {
        return Err(Error::KeyMismatch("gradients are not keyed like the parameters".into()));
    }
    for (name, p) in params.iter() {
        if grads[name].shape != p.shape {
            return Err(Error::Shape(format!("gradient of {name} has shape {:?}, parameter {:?}", grads[name].shape, p.shape)));
        }
    }
    state.t += 1;
    let lr = config.lr_at(state.t);
    for (name, p) in params.iter_mut() {
        let mut g = grads[name].clone();
        if config.gc_enabled {
            centralize_gradient(&mut g);
        }
        if config.weight_decay > 0.0 {
            let keep = T::from_f64(1.0 - lr * config.weight_decay);
            p.data.iter_mut().for_each(|v| *v *= keep);
        }
        radam_step(state, config, name, p, &g, lr)?;
    }
    if state.t % config.lookahead_k as u64 == 0 {
        lookahead_sync(state, config, params);
    }
    Ok(())
}
