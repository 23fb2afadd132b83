//! Bias-corrected Adam.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moment decay and stabilization constants. The paper names the
/// optimizer but none of these, so Transformer-practice defaults apply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
        }
    }
}

/// Per-parameter accumulators. `second_moment` entries stay >= 0 and
/// `step_count` advances by exactly one per update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            step_count: 0,
            config,
        }
    }
}

/// One Adam update in place. `lr = 0` leaves the parameters bit-identical
/// (moments still advance). Shape mismatches are programming errors and are
/// reported explicitly.
pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            expected: params.shape().to_vec(),
            got: grads.shape().to_vec(),
        });
    }
    debug_assert!(lr >= 0.0);
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = params.data_mut();
    let g = grads.data();
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        if lr != 0.0 {
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_fresh_state_is_identity() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(vec![3]);
        let mut s = AdamState::new(&[3], AdamConfig::default());
        let before = p.clone();
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_lr_is_exact_identity() {
        let mut p = Tensor::from_vec(vec![0.5, -0.25]);
        let g = Tensor::from_vec(vec![1.0, -4.0]);
        let mut s = AdamState::new(&[2], AdamConfig::default());
        let before = p.clone();
        adam_step(&mut p, &g, &mut s, 0.0).unwrap();
        assert_eq!(p, before);
        // moments still advanced
        assert!(s.first_moment.data()[0] != 0.0);
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let g = Tensor::from_vec(vec![1.0, -2.0]);
        let mut s = AdamState::new(&[2], AdamConfig::default());
        let lr = 0.01;
        adam_step(&mut p, &g, &mut s, lr).unwrap();
        assert!((p.data()[0] + lr).abs() < 1e-6);
        assert!((p.data()[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn three_step_trajectory_matches_scalar_oracle() {
        // Quadratic f(x) = 0.5*(x-3)^2, gradient x-3.
        let cfg = AdamConfig::default();
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut s = AdamState::new(&[1], cfg);
        let lr = 0.1;
        for _ in 0..3 {
            let g = Tensor::from_vec(vec![p.data()[0] - 3.0]);
            adam_step(&mut p, &g, &mut s, lr).unwrap();
        }

        // Independent step-by-step reference computation.
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = x - 3.0;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            x -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        assert!((p.data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut s = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut s, 0.1).is_err());
    }
}
