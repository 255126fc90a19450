//! Adam with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::{Array, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    /// A learning rate of exactly zero is accepted and makes every step a
    /// no-op; negative or non-finite rates are rejected.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TensorError::InvalidArgument(format!(
                    "{name} = {b} outside [0, 1)"
                )));
            }
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(TensorError::InvalidArgument(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First/second moment buffers and the shared step counter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Array<T>>,
    second: Vec<Array<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `p ← p − lr·wd·p`, then the bias-corrected Adam update.
    pub fn step(&mut self, params: &mut [Array<T>], grads: &[Array<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array::zeros(p.shape())).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() {
            return Err(TensorError::InvalidArgument(
                "parameter list changed between steps".into(),
            ));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let (lr, wd, b1, b2, eps) = (
            T::lit(c.lr),
            T::lit(c.weight_decay),
            T::lit(c.beta1),
            T::lit(c.beta2),
            T::lit(c.eps),
        );
        let (bc1, bc2) = (T::lit(correction1), T::lit(correction2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *pj = *pj - lr * wd * *pj;
                *mj = b1 * *mj + (T::one() - b1) * gj;
                *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                let m_hat = *mj / bc1;
                let v_hat = *vj / bc2;
                *pj = *pj - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> Vec<Array<f64>> {
        vec![Array::scalar(v)]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut p = single(1.25);
        adam.step(&mut p, &single(0.0)).unwrap();
        assert_eq!(p[0].item(), 1.25);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        let mut p = single(1.0);
        adam.step(&mut p, &single(1.0)).unwrap();
        // m̂ = 1, v̂ = 1, so p = 1 − 0.1 / (1 + 1e-8)
        assert!((p[0].item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0].item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let cfg = AdamConfig {
            lr: 0.003,
            weight_decay: 0.001,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        let mut p = single(2.0);
        adam.step(&mut p, &single(0.0)).unwrap();
        assert!((p[0].item() - 2.0 * (1.0 - 3e-6)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let bad = [
            AdamConfig { lr: -1e-3, ..Default::default() },
            AdamConfig { lr: f64::NAN, ..Default::default() },
            AdamConfig { beta1: 1.0, ..Default::default() },
            AdamConfig { beta2: -0.1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(Adam::<f32>::new(cfg).is_err());
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = AdamConfig { lr: 0.0, weight_decay: 0.5, ..Default::default() };
        let mut adam = Adam::new(cfg).unwrap();
        let mut p = vec![Array::<f32>::from_fn([1, 2, 2, 2], |i| i as f32)];
        let before = p.clone();
        adam.step(&mut p, &[Array::full([1, 2, 2, 2], 3.0)]).unwrap();
        assert_eq!(p, before);
    }
}
