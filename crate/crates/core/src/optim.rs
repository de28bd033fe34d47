//! SGD with momentum and weight decay, plus the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Result, SnnError};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(SnnError::Config(format!(
                "learning rate must be finite and nonnegative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(SnnError::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(SnnError::Config(format!(
                "weight decay must be nonnegative, got {weight_decay}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update over named parameters:
    /// `v ← momentum·v + g + weight_decay·p`, then `p ← p − lr·v`.
    ///
    /// Gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves the whole parameter set unchanged.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(SnnError::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            p.expect_same_shape(g, &format!("gradient of `{name}`"))?;
            g.check_finite(&format!("gradient of `{name}`"))?;
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        } else if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, (_, p))| v.shape() != p.shape())
        {
            return Err(SnnError::Shape(
                "parameter set changed shape between optimizer steps".into(),
            ));
        }

        let (lr, mom, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let pd = p.data_mut();
            for ((pi, gi), vi) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mom * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 + (PI * epoch as f64 / total as f64).cos()) / 2.0
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params() {
        let mut sgd = SgdState::new(0.1, 0.9, 0.0).unwrap();
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        sgd.step(&mut [("p", &mut p)], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_step() {
        let mut sgd = SgdState::new(0.1, 0.0, 0.0).unwrap();
        let mut p = Tensor::scalar(0.0);
        sgd.step(&mut [("p", &mut p)], &[&Tensor::scalar(1.0)]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.05, 0.9, 1e-2);
        let mut sgd = SgdState::new(lr, mu, wd).unwrap();
        let mut p = Tensor::scalar(1.5);
        let (g1, g2) = (0.3, -0.7);
        sgd.step(&mut [("p", &mut p)], &[&Tensor::scalar(g1)]).unwrap();
        sgd.step(&mut [("p", &mut p)], &[&Tensor::scalar(g2)]).unwrap();
        // v1 = g1 + wd p0 ; p1 = p0 - lr v1 ; v2 = mu v1 + g2 + wd p1 ; p2 = p1 - lr v2
        let p0 = 1.5;
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mu * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((p.data()[0] - p2).abs() < 1e-15);
        assert!((sgd.velocity()[0].data()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut sgd = SgdState::new(0.1, 0.0, 0.0).unwrap();
        let mut p = Tensor::scalar(0.0);
        let mut g = Tensor::scalar(0.0);
        g.data_mut()[0] = f64::INFINITY;
        let err = sgd.step(&mut [("layer3.weight", &mut p)], &[&g]).unwrap_err();
        assert!(err.to_string().contains("layer3.weight"), "{err}");
        assert_eq!(p.data(), &[0.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut sgd = SgdState::new(0.0, 0.9, 1e-4).unwrap();
        let mut p = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let before = p.clone();
        for _ in 0..3 {
            sgd.step(&mut [("p", &mut p)], &[&Tensor::full(&[3], 5.0)]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut a = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let n = clip_grad_norm(&mut [&mut a], 1.0);
        assert_eq!(n, 5.0);
        assert!((a.norm_sq() - 1.0).abs() < 1e-15);
    }
}
