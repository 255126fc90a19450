use intensim_tensor::{Array, Graph, Scalar, Var};

use super::{Init, ParamSet, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};

/// `(kernel, stride, pad, width multiplier, normalized)` per layer; the last
/// layer maps to a single logit channel.
pub const PATCHGAN_LAYERS: [(usize, usize, usize, usize, bool); 5] = [
    (4, 2, 1, 1, false),
    (4, 2, 1, 2, true),
    (4, 2, 1, 4, true),
    (4, 1, 1, 8, true),
    (4, 1, 1, 0, false),
];

/// Receptive field of a stack of `(kernel, stride)` layers.
pub fn patchgan_receptive_field(layers: &[(usize, usize)]) -> usize {
    layers.iter().rev().fold(1, |r, &(k, s)| r * s + k - s)
}

/// Convolutional discriminator producing one logit per overlapping patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGan<T> {
    pub in_channels: usize,
    pub base_width: usize,
    pub params: ParamSet<T>,
}

impl<T: Scalar> PatchGan<T> {
    pub fn new(in_channels: usize, base_width: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || base_width == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let mut init = Init::new(seed);
        let mut params = ParamSet::new();
        let mut prev = in_channels;
        for (i, &(k, _, _, mult, norm)) in PATCHGAN_LAYERS.iter().enumerate() {
            let out = if mult == 0 { 1 } else { base_width * mult };
            params.push(format!("disc{i}.weight"), init.gaussian([out, prev, k, k]));
            if norm {
                params.push(format!("disc{i}.gain"), Array::full([1, out, 1, 1], T::one()));
                params.push(format!("disc{i}.shift"), Array::zeros([1, out, 1, 1]));
            } else {
                params.push(format!("disc{i}.bias"), Array::zeros([1, out, 1, 1]));
            }
            prev = out;
        }
        Ok(Self {
            in_channels,
            base_width,
            params,
        })
    }

    pub fn receptive_field() -> usize {
        let ks: Vec<(usize, usize)> = PATCHGAN_LAYERS.iter().map(|l| (l.0, l.1)).collect();
        patchgan_receptive_field(&ks)
    }

    /// Logit map extent for an `height×width` input.
    pub fn logit_size(height: usize, width: usize) -> Result<(usize, usize)> {
        let step = |n: usize| -> Result<usize> {
            let mut n = n;
            for &(k, s, p, _, _) in &PATCHGAN_LAYERS {
                let span = (n + 2 * p).checked_sub(k).filter(|v| v % s == 0);
                n = span.ok_or_else(|| {
                    Error::Config(format!(
                        "extent {n} does not fit a k{k} s{s} p{p} layer exactly"
                    ))
                })? / s
                    + 1;
            }
            Ok(n)
        };
        Ok((step(height)?, step(width)?))
    }

    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.in_channels
            )));
        }
        Self::logit_size(h, w)?;
        let slope = T::lit(LEAKY_SLOPE);
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter layout");
        let mut cur = x;
        let last = PATCHGAN_LAYERS.len() - 1;
        for (i, &(_, s, pad, _, norm)) in PATCHGAN_LAYERS.iter().enumerate() {
            let wt = next();
            if norm {
                let (gain, shift) = (next(), next());
                cur = g.conv2d(cur, wt, None, s, pad)?;
                cur = g.instance_norm(cur, gain, shift, T::lit(NORM_EPS))?;
            } else {
                let b = next();
                cur = g.conv2d(cur, wt, Some(b), s, pad)?;
            }
            if i != last {
                cur = g.leaky_relu(cur, slope)?;
            }
        }
        Ok(cur)
    }
}
