//! Adam with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{AbsaError, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one tensor plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(AbsaError::Dimension {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.m.len()],
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - config.beta1.powi(t));
    let c2 = T::from_f64(1.0 - config.beta2.powi(t));
    let lr = T::from_f64(config.lr);
    let eps = T::from_f64(config.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        Adam {
            config,
            states: params.iter().map(|(_, t)| AdamState::new(t.numel())).collect(),
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.config.lr = lr;
        self
    }

    /// `grads[i]` belongs to the i-th store entry; `None` means zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != self.states.len() || params.len() != self.states.len() {
            return Err(AbsaError::Dimension {
                op: "adam",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((tensor, grad), state) in params.tensors_mut().zip(grads).zip(&mut self.states) {
            match grad {
                Some(g) => adam_step(tensor.data_mut(), g, state, &self.config)?,
                None => {
                    let zeros = vec![T::zero(); tensor.numel()];
                    adam_step(tensor.data_mut(), &zeros, state, &self.config)?
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for v in grads.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5f64, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![1.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let (g1, g2) = (0.3f64, -1.7f64);
        let mut p = vec![2.0f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[g1], &mut s, &cfg).unwrap();
        adam_step(&mut p, &[g2], &mut s, &cfg).unwrap();

        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let x1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - x2).abs() < 1e-6);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0f32; 3];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        let after: f64 = g.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn store_optimizer_steps_every_tensor() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::ones(&[2]));
        store.insert("b", Tensor::ones(&[1]));
        let mut opt = Adam::new(&store, AdamConfig::default()).with_lr(0.1);
        opt.step(&mut store, &[Some(vec![1.0, -1.0]), None]).unwrap();
        assert!(store.get("a").unwrap().data()[0] < 1.0);
        assert!(store.get("a").unwrap().data()[1] > 1.0);
        assert_eq!(store.get("b").unwrap().data(), &[1.0]);
    }
}
