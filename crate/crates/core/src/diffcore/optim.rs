//! Trainable parameters and stochastic gradient descent with Nesterov
//! momentum in the lookahead (Sutskever) formulation:
//!
//! ```text
//! v <- mu * v - lr * g(theta + mu * v)
//! theta <- theta + v
//! ```
//!
//! The training loop brackets each forward/backward pass with
//! [`apply_lookahead`] / [`remove_lookahead`] so the gradient is evaluated at
//! `theta + mu * v`, then [`sgd_nesterov_step`] applies the recurrence to
//! `theta` itself.

use super::tensor::Tensor;
use super::{DiffError, Result};

/// A named trainable tensor with its gradient accumulator and optimizer
/// velocity. Velocity is all-zero at construction.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
    pub velocity: Tensor<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            velocity,
        }
    }
}

/// Moves every parameter value to its lookahead point `theta + mu * v`.
pub fn apply_lookahead(params: &mut [&mut Parameter], momentum: f32) {
    for p in params.iter_mut() {
        let v = p.velocity.data().to_vec();
        for (val, vel) in p.value.data_mut().iter_mut().zip(v) {
            *val += momentum * vel;
        }
    }
}

/// Restores `theta` after a lookahead forward/backward pass.
pub fn remove_lookahead(params: &mut [&mut Parameter], momentum: f32) {
    for p in params.iter_mut() {
        let v = p.velocity.data().to_vec();
        for (val, vel) in p.value.data_mut().iter_mut().zip(v) {
            *val -= momentum * vel;
        }
    }
}

/// One optimizer step on `theta`, with gradients already evaluated at the
/// lookahead point. Gradients are cleared after the update. Aborts on any
/// non-finite gradient, leaving the parameters untouched.
pub fn sgd_nesterov_step(
    params: &mut [&mut Parameter],
    learning_rate: f32,
    momentum: f32,
) -> Result<()> {
    for p in params.iter() {
        if let Some(i) = p.grad.data().iter().position(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteGradient {
                name: p.name.clone(),
                index: i,
            });
        }
    }
    for p in params.iter_mut() {
        let n = p.value.numel();
        for i in 0..n {
            let new_vel = momentum * p.velocity.data()[i] - learning_rate * p.grad.data()[i];
            p.velocity.data_mut()[i] = new_vel;
            p.value.data_mut()[i] += new_vel;
        }
        p.grad.fill(0.0);
    }
    Ok(())
}

/// Clears gradient accumulators.
pub fn zero_grads(params: &mut [&mut Parameter]) {
    for p in params.iter_mut() {
        p.grad.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(theta: f32, vel: f32, grad: f32) -> Parameter {
        let mut p = Parameter::new("p", Tensor::from_vec(&[1], vec![theta]).unwrap());
        p.velocity.data_mut()[0] = vel;
        p.grad.data_mut()[0] = grad;
        p
    }

    #[test]
    fn single_step_recurrence() {
        // theta=1, v=0, mu=0.9, lr=0.1, g=2 -> v=-0.2, theta=0.8
        let mut p = scalar_param(1.0, 0.0, 2.0);
        sgd_nesterov_step(&mut [&mut p], 0.1, 0.9).unwrap();
        assert!((p.velocity.data()[0] + 0.2).abs() < 1e-7);
        assert!((p.value.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_theta() {
        let mut p = scalar_param(1.25, 0.0, 0.0);
        sgd_nesterov_step(&mut [&mut p], 0.1, 0.9).unwrap();
        assert_eq!(p.value.data()[0], 1.25);
        assert_eq!(p.velocity.data()[0], 0.0);
    }

    #[test]
    fn two_steps_with_constant_gradient() {
        // theta=1, v=0, g=1, lr=0.1, mu=0.9 -> theta 0.9 then 0.71
        let mut p = scalar_param(1.0, 0.0, 1.0);
        sgd_nesterov_step(&mut [&mut p], 0.1, 0.9).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-7);
        p.grad.data_mut()[0] = 1.0;
        sgd_nesterov_step(&mut [&mut p], 0.1, 0.9).unwrap();
        assert!((p.value.data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut p = scalar_param(0.37, -0.11, 0.53);
            sgd_nesterov_step(&mut [&mut p], 0.007, 0.9).unwrap();
            (p.value.data()[0].to_bits(), p.velocity.data()[0].to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = scalar_param(1.0, 0.0, f32::NAN);
        let err = sgd_nesterov_step(&mut [&mut p], 0.1, 0.9);
        assert!(matches!(err, Err(DiffError::NonFiniteGradient { .. })));
        // Parameter untouched by the aborted step.
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn lookahead_bracket_restores_theta() {
        let mut p = scalar_param(0.5, 0.2, 0.0);
        apply_lookahead(&mut [&mut p], 0.5);
        assert!((p.value.data()[0] - 0.6).abs() < 1e-7);
        remove_lookahead(&mut [&mut p], 0.5);
        assert!((p.value.data()[0] - 0.5).abs() < 1e-7);
        sgd_nesterov_step(&mut [&mut p], 0.1, 0.5).unwrap();
        // theta' = theta + mu*v = 0.5 + 0.1 = 0.6, v' = 0.1
        assert!((p.value.data()[0] - 0.6).abs() < 1e-6);
        assert!((p.velocity.data()[0] - 0.1).abs() < 1e-7);
    }
}
