//! SGD with momentum, learning-rate schedules, weight decay and clipping.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One momentum-SGD update: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_momentum_step<F: Scalar>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    velocity: &mut Tensor<F>,
    lr: F,
    momentum: F,
) {
    debug_assert!(lr > F::zero(), "learning rate must be positive");
    debug_assert!(momentum >= F::zero() && momentum < F::one(), "momentum must be in [0, 1)");
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// `lr(e) = initial * decay^floor(e / period_epochs)`
    ExponentialDecay { initial: f64, decay: f64, period_epochs: u32 },
    /// Cyclic cosine between max and min with the given period.
    CosineDecay { max: f64, min: f64, period_epochs: u32 },
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: u32) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::ExponentialDecay { initial, decay, period_epochs } => {
                initial * decay.powi((epoch / period_epochs.max(1)) as i32)
            }
            LrSchedule::CosineDecay { max, min, period_epochs } => {
                let period = period_epochs.max(1);
                let t = f64::from(epoch % period) / f64::from(period);
                min + 0.5 * (max - min) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Adds `coefficient * sum(||w||^2)` to the loss; the matching gradient
/// contribution `2 * coefficient * w` is accumulated into `grads`.
pub fn l2_regularization<F: Scalar>(params: &[&Tensor<F>], grads: &mut [Tensor<F>], coefficient: F) -> F {
    let mut loss = F::zero();
    let two = F::from_float(2.0);
    for (p, g) in params.iter().zip(grads.iter_mut()) {
        loss += p.sq_l2();
        for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
            *gv = *gv + two * coefficient * pv;
        }
    }
    coefficient * loss
}

/// Rescale the concatenated gradient vector to global norm <= max_norm.
/// Returns the pre-clip norm.
pub fn gradient_clip_by_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: F) -> F {
    let total: F = grads.iter().map(|g| g.sq_l2()).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > F::zero() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_vanilla_sgd() {
        let mut p = Tensor::from_vec(&[2], vec![1.0f64, 2.0]);
        let g = Tensor::from_vec(&[2], vec![0.5, -1.0]);
        let mut v = Tensor::zeros(&[2]);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.0);
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn quadratic_descent_step() {
        // f(w) = w^2, f'(1) = 2, w - 0.1*2 = 0.8
        let mut p = Tensor::from_vec(&[1], vec![1.0f64]);
        let g = Tensor::from_vec(&[1], vec![2.0]);
        let mut v = Tensor::zeros(&[1]);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.0);
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn exponential_decay_schedule() {
        let s = LrSchedule::ExponentialDecay { initial: 0.04, decay: 0.999, period_epochs: 2 };
        assert_eq!(s.at_epoch(0), 0.04);
        assert!((s.at_epoch(4) - 0.03992004).abs() < 1e-12);
    }

    #[test]
    fn cosine_decay_endpoints() {
        let s = LrSchedule::CosineDecay { max: 0.05, min: 0.001, period_epochs: 20 };
        assert!((s.at_epoch(0) - 0.05).abs() < 1e-15);
        let mid = s.at_epoch(10);
        assert!((mid - 0.0255).abs() < 1e-12);
        // restarts after a full period
        assert!((s.at_epoch(20) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn clip_halves_norm_ten() {
        // two tensors with combined norm 10
        let mut grads = vec![
            Tensor::from_vec(&[2], vec![6.0f64, 0.0]),
            Tensor::from_vec(&[1], vec![8.0f64]),
        ];
        let norm = gradient_clip_by_norm(&mut grads, 5.0);
        assert_eq!(norm, 10.0);
        assert_eq!(grads[0].data(), &[3.0, 0.0]);
        assert_eq!(grads[1].data(), &[4.0]);
    }

    #[test]
    fn clip_leaves_small_norm_unchanged() {
        let mut grads = vec![Tensor::from_vec(&[2], vec![0.0f64, 4.0])];
        gradient_clip_by_norm(&mut grads, 5.0);
        assert_eq!(grads[0].data(), &[0.0, 4.0]);
    }

    #[test]
    fn l2_adds_quadratic_term() {
        let p = Tensor::from_vec(&[2], vec![1.0f64, -2.0]);
        let mut grads = vec![Tensor::zeros(&[2])];
        let loss = l2_regularization(&[&p], &mut grads, 0.1);
        assert!((loss - 0.5).abs() < 1e-15);
        assert_eq!(grads[0].data(), &[0.2, -0.4]);
    }
}
