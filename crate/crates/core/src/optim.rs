//! Adam with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape());
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// One Adam update at the configured learning rate.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), TensorError> {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, grads, lr)
    }

    /// One Adam update at an explicit learning rate (for schedules).
    ///
    /// Both moments are updated everywhere, but a parameter entry only moves
    /// when its gradient entry is nonzero.
    pub fn step_with_lr(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<(), TensorError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::dim(
                "adam_step",
                &[params.len(), self.first.len()],
                &[grads.len()],
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::dim("adam_step", p.shape(), g.shape()));
            }
        }
        for (p, m) in params.iter().zip(&self.first) {
            if p.shape() != m.shape() {
                return Err(TensorError::dim("adam_step", p.shape(), m.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (bc1, bc2, lr, eps) = (T::of(bc1), T::of(bc2), T::of(lr), T::of(eps));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                if gi != T::zero() {
                    let m_hat = md[i] / bc1;
                    let v_hat = vd[i] / bc2;
                    pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradient tensors.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .map(|g| g.norm_sq().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let factor = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::new(&[values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut params = vec![t(&[1.0, -2.0])];
        let mut state = OptimizerState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[t(&[0.5, -0.5])]).unwrap();
        let after_first = params[0].clone();
        let m1 = state.first_moments()[0].clone();
        let v1 = state.second_moments()[0].clone();

        state.step(&mut params, &[t(&[0.0, 0.0])]).unwrap();
        assert_eq!(params[0], after_first);
        for i in 0..2 {
            assert!((state.first_moments()[0].data()[i] - 0.9 * m1.data()[i]).abs() < 1e-15);
            assert!((state.second_moments()[0].data()[i] - 0.999 * v1.data()[i]).abs() < 1e-15);
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut params = vec![t(&[0.0, 0.0, 0.0])];
        let mut state = OptimizerState::new(cfg, &params);
        state.step(&mut params, &[t(&[3.0, -0.02, 0.0])]).unwrap();
        let p = params[0].data();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut params = vec![t(&[0.0])];
        let mut state = OptimizerState::new(cfg, &params);
        for _ in 0..100 {
            let w = params[0].data()[0];
            state.step(&mut params, &[t(&[2.0 * (w - 3.0)])]).unwrap();
        }
        assert!(
            (params[0].data()[0] - 3.0).abs() < 0.1,
            "w = {}",
            params[0].data()[0]
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![t(&[0.0, 1.0])];
        let mut state = OptimizerState::new(AdamConfig::default(), &params);
        let err = state.step(&mut params, &[t(&[1.0])]).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { .. }));
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut grads = vec![t(&[3.0]), t(&[4.0])];
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
        let mut small = vec![t(&[0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3]);
    }
}
