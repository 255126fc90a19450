//! Composite layers and losses built from graph primitives, so they are
//! differentiable to any order.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::{Array, Graph, Scalar, Var};

impl<T: Scalar> Graph<T> {
    /// Normalizes every `(n, c)` plane to zero mean and unit variance, then
    /// applies a per-channel affine map. `gain` and `bias` are `1×C×1×1`.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x);
        let [n, c, h, w] = shape;
        for p in [gain, bias] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm",
                    lhs: shape,
                    rhs: self.shape(p),
                });
            }
        }
        let inv_area = T::lit(1.0 / (h * w).max(1) as f64);
        let plane = [n, c, 1, 1];
        let s = self.sum_to(x, plane)?;
        let mean = self.scale(s, inv_area)?;
        let mean_b = self.broadcast(mean, shape)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.square(centered)?;
        let ss = self.sum_to(sq, plane)?;
        let var = self.scale(ss, inv_area)?;
        let var_eps = self.add_scalar(var, eps)?;
        let inv_std = self.powf(var_eps, T::lit(-0.5))?;
        let inv_std_b = self.broadcast(inv_std, shape)?;
        let normed = self.mul(centered, inv_std_b)?;
        let gain_b = self.broadcast(gain, shape)?;
        let bias_b = self.broadcast(bias, shape)?;
        let scaled = self.mul(normed, gain_b)?;
        self.add(scaled, bias_b)
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1−p)`. Identity outside training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = Array::from_fn(self.shape(x), |_| {
            if rng.gen::<f64>() >= p {
                keep
            } else {
                T::zero()
            }
        });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// `Σ (pred − target)² · mask / Σ mask`, zero when the mask is empty.
    /// `mask` must be a constant of zeros and ones.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        self.same_shape_check("masked_mse", pred, target)?;
        self.same_shape_check("masked_mse", pred, mask)?;
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.masked_mean(sq, mask)
    }

    /// `Σ |pred − target| · mask / Σ mask`, zero when the mask is empty.
    pub fn masked_l1(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        self.same_shape_check("masked_l1", pred, target)?;
        self.same_shape_check("masked_l1", pred, mask)?;
        let d = self.sub(pred, target)?;
        let a = self.abs(d)?;
        self.masked_mean(a, mask)
    }

    /// Mean absolute error over all elements.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape_check("l1", pred, target)?;
        let d = self.sub(pred, target)?;
        let a = self.abs(d)?;
        self.mean(a)
    }

    fn masked_mean(&mut self, values: Var, mask: Var) -> Result<Var> {
        let count = self.value(mask).sum_f64();
        let masked = self.mul(values, mask)?;
        let total = self.sum(masked)?;
        let inv = if count > 0.0 { 1.0 / count } else { 0.0 };
        self.scale(total, T::lit(inv))
    }

    fn same_shape_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        Ok(())
    }
}
