//! Adam with bias correction.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    /// Per-parameter (first moment, second moment), keyed by name.
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

/// One optimizer step over named parameters. Parameters missing from
/// `grads` are treated as zero-gradient.
pub fn adam_step(
    params: &mut [(String, &mut Tensor)],
    grads: &HashMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    state.step_count += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step_count as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step_count as i32);

    for (name, p) in params.iter_mut() {
        let zero;
        let g = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros_like(p);
                &zero
            }
        };
        if g.len() != p.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { name: name.clone() });
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros_like(p), Tensor::zeros_like(p)));
        let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut w = Tensor::row(vec![1.0, -2.0, 3.0]);
        let before = w.clone();
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::zeros(vec![3]));
        let mut state = AdamState::new(0.1);
        adam_step(&mut [("w".to_string(), &mut w)], &grads, &mut state).unwrap();
        assert_eq!(w, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr_against_gradient() {
        let mut w = Tensor::row(vec![0.0, 0.0]);
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), Tensor::row(vec![3.0, -0.5]));
        let mut state = AdamState::new(0.1);
        adam_step(&mut [("w".to_string(), &mut w)], &grads, &mut state).unwrap();
        // bias-corrected first step: magnitude ~= lr, direction = -sign(g)
        assert!((w.data()[0] + 0.1).abs() < 1e-6);
        assert!((w.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(w) = (w-2)^2, grad = 2(w-2)
        let mut w = Tensor::row(vec![0.0]);
        let mut state = AdamState::new(0.1);
        for _ in 0..200 {
            let g = 2.0 * (w.data()[0] - 2.0);
            let mut grads = HashMap::new();
            grads.insert("w".to_string(), Tensor::row(vec![g]));
            adam_step(&mut [("w".to_string(), &mut w)], &grads, &mut state).unwrap();
        }
        assert!((w.data()[0] - 2.0).abs() < 1e-3, "w = {}", w.data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut w = Tensor::row(vec![1.0]);
        let mut grads = HashMap::new();
        grads.insert(
            "hub.w1".to_string(),
            Tensor::unchecked(vec![1], vec![f64::NAN]),
        );
        let mut state = AdamState::default();
        let err = adam_step(&mut [("hub.w1".to_string(), &mut w)], &grads, &mut state)
            .unwrap_err()
            .to_string();
        assert!(err.contains("hub.w1"), "{err}");
    }
}
