//! Adam optimizer with bias correction and no weight decay.

use crate::error::{Error, Result};
use crate::network::Parameter;
use crate::tensor::Tensor;

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            states: Vec::new(),
        }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// One update over all parameters, consuming `Parameter::grad`.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f32) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|p| AdamState::new(p.value.shape()))
                .collect();
        }
        if self.states.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.states.len(),
                params.len()
            )));
        }
        for (param, state) in params.iter_mut().zip(&mut self.states) {
            if param.value.shape() != param.grad.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: param.value.shape().to_vec(),
                    rhs: param.grad.shape().to_vec(),
                });
            }
            state.step_count += 1;
            let t = state.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let m = state.first_moment.data_mut();
            let v = state.second_moment.data_mut();
            let g = param.grad.data();
            let w = param.value.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(vals: Vec<f32>) -> Parameter {
        Parameter::new(Tensor::from_vec(vec![vals.len()], vals).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = param(vec![1.0, -2.0, 3.0]);
        let before = p.value.clone();
        let mut opt = Adam::new();
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_in_sign_direction() {
        let mut p = param(vec![0.0, 0.0]);
        p.grad = Tensor::from_vec(vec![2], vec![0.5, -3.0]).unwrap();
        let mut opt = Adam::new();
        opt.step(&mut [&mut p], 0.1).unwrap();
        // bias-corrected first step: w -= lr * g/(|g| + tiny)
        assert!((p.value.data()[0] + 0.1).abs() < 1e-4, "{:?}", p.value.data());
        assert!((p.value.data()[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn hundred_steps_on_quadratic_converges_near_zero() {
        // minimize f(w) = w^2 from w=1 with lr=0.1; oracle below runs the
        // same scalar recurrence independently in f64.
        let mut p = param(vec![1.0]);
        let mut opt = Adam::new();
        for _ in 0..100 {
            let w = p.value.data()[0];
            p.grad = Tensor::from_vec(vec![1], vec![2.0 * w]).unwrap();
            opt.step(&mut [&mut p], 0.1).unwrap();
        }
        assert!(p.value.data()[0].abs() < 0.05, "w = {}", p.value.data()[0]);

        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((p.value.data()[0] as f64 - w).abs() < 1e-3);
        assert_eq!(opt.states()[0].step_count, 100);
    }

    #[test]
    fn nonpositive_lr_is_config_error() {
        let mut p = param(vec![1.0]);
        let mut opt = Adam::new();
        assert!(matches!(
            opt.step(&mut [&mut p], 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            opt.step(&mut [&mut p], -0.1),
            Err(Error::Config(_))
        ));
    }
}
