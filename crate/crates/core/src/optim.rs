//! Adaptive-moment gradient descent with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    /// First moments, one buffer per parameter tensor.
    pub m: Vec<Vec<f64>>,
    /// Second moments.
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            hyper: AdamHyper::default(),
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One update of every parameter tensor. Non-finite gradients reject the
/// step and leave parameters and state untouched.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} parameter tensors, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape(
                "adam_step",
                format!("tensor {i}: {} values, {} gradients, {} moments", p.len(), g.len(), state.m[i].len()),
            ));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {bad} in tensor {i}; step rejected")));
        }
    }

    state.step += 1;
    let AdamHyper { beta1, beta2, epsilon } = state.hyper;
    let t = state.step as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / correct1;
            let v_hat = v[j] / correct2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut x = vec![0.7, -1.2];
        let mut state = AdamState::new([2]);
        state.m[0] = vec![0.5, -0.5];
        state.v[0] = vec![0.25, 0.25];
        adam_step(&mut [&mut x[..]], &[vec![0.0, 0.0]], &mut state, 0.001).unwrap();
        // with nonzero moments the parameters still move; with zero moments they do not
        let mut y = vec![0.7, -1.2];
        let mut fresh = AdamState::new([2]);
        adam_step(&mut [&mut y[..]], &[vec![0.0, 0.0]], &mut fresh, 0.001).unwrap();
        assert_eq!(y, vec![0.7, -1.2]);
        assert_eq!(state.m[0], vec![0.45, -0.45]);
        assert!((state.v[0][0] - 0.24975).abs() < 1e-15);
        assert_eq!(state.step, 1);
        assert_ne!(x, vec![0.7, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02] {
            let mut x = vec![1.0];
            let mut state = AdamState::new([1]);
            adam_step(&mut [&mut x[..]], &[vec![g]], &mut state, 0.001).unwrap();
            let moved = 1.0 - x[0];
            assert!((moved - 0.001 * f64::signum(g)).abs() < 1e-9, "moved {moved}");
        }
    }

    #[test]
    fn minimises_a_parabola() {
        let mut x = vec![1.0];
        let mut state = AdamState::new([1]);
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            adam_step(&mut [&mut x[..]], &[g], &mut state, 0.1).unwrap();
        }
        assert!(x[0].abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut x = vec![1.0];
        let mut state = AdamState::new([1]);
        let err = adam_step(&mut [&mut x[..]], &[vec![f64::NAN]], &mut state, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(x, vec![1.0]);
        assert_eq!(state.step, 0);
    }
}
