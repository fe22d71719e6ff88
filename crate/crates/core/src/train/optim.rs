//! Adamax with coupled weight decay, global-norm clipping and the warmup
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::params::{decays, ParamStore};
use crate::tensor::Gradients;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient for {0}")]
    NonFinite(String),
    #[error("gradient for {name} has shape {grad:?}, parameter has {param:?}")]
    Shape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("no parameter named {0}")]
    Unknown(String),
}

/// First moment `m`, infinity-norm accumulator `u` and update count `t` of
/// one parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamaxState {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

/// One Adamax update of `param` in place.
pub fn adamax_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamaxState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFinite(String::new()));
    }
    if state.m.len() != param.len() {
        state.m = vec![0.0; param.len()];
        state.u = vec![0.0; param.len()];
    }
    state.t += 1;
    let correction = 1.0 - BETA1.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i] + weight_decay * param[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.u[i] = (BETA2 * state.u[i]).max(g.abs());
        param[i] -= lr * state.m[i] / (correction * (state.u[i] + EPSILON));
    }
    Ok(())
}

/// Adamax over a named parameter set. Only parameters present in a step's
/// gradients are touched by that step.
#[derive(Debug, Clone, Default)]
pub struct Adamax {
    pub weight_decay: f64,
    states: BTreeMap<String, AdamaxState>,
}

impl Adamax {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamaxState> {
        self.states.get(name)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), OptimError> {
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).ok_or_else(|| OptimError::Unknown(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    name: name.clone(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
            let wd = if decays(name) { self.weight_decay } else { 0.0 };
            let state = self.states.entry(name.clone()).or_default();
            adamax_update(p.data_mut(), g.data(), state, lr, wd).map_err(|e| match e {
                OptimError::NonFinite(_) => OptimError::NonFinite(name.clone()),
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup from 0 to `peak` over the first `round(warmup * total)`
/// steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: f64, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let w = (warmup * total as f64).round() as usize;
    if w > 0 && step <= w {
        peak * step as f64 / w as f64
    } else if w >= total {
        peak
    } else {
        peak * (total - step) as f64 / (total - w) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn scalar_first_step() {
        let mut p = [1.0];
        let mut s = AdamaxState::default();
        adamax_update(&mut p, &[1.0], &mut s, 0.1, 0.0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_param_and_decays_moment() {
        let mut p = [0.5];
        let mut s = AdamaxState {
            m: vec![0.2],
            u: vec![0.3],
            t: 3,
        };
        adamax_update(&mut p, &[0.0], &mut s, 0.1, 0.0).unwrap();
        assert!((s.m[0] - 0.18).abs() < 1e-15);
        assert!((s.u[0] - 0.2997).abs() < 1e-15);
        assert!(p[0] < 0.5);
        let mut q = [0.5];
        let mut fresh = AdamaxState::default();
        adamax_update(&mut q, &[0.0], &mut fresh, 0.1, 0.0).unwrap();
        assert_eq!(q[0], 0.5);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = [0.5];
        let mut s = AdamaxState::default();
        assert!(adamax_update(&mut p, &[f64::NAN], &mut s, 0.1, 0.0).is_err());
    }

    #[test]
    fn schedule_anchors() {
        assert!((lr_at(5, 100, 0.1, 5e-5) - 2.5e-5).abs() < 1e-18);
        assert_eq!(lr_at(10, 100, 0.1, 5e-5), 5e-5);
        assert_eq!(lr_at(100, 100, 0.1, 5e-5), 0.0);
        assert_eq!(lr_at(0, 100, 0.1, 5e-5), 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = Gradients::new();
        g.insert("a", Tensor::vector(vec![0.0, 2.0]));
        assert_eq!(clip_gradients(&mut g, 1.0), 2.0);
        assert_eq!(g.get("a").unwrap().data(), &[0.0, 1.0]);
        let mut h = Gradients::new();
        h.insert("a", Tensor::vector(vec![0.3, 0.4]));
        clip_gradients(&mut h, 1.0);
        assert_eq!(h.get("a").unwrap().data(), &[0.3, 0.4]);
    }
}
