use intensim_tensor::{Array, Graph, Scalar, Var};

use super::{Init, ParamSet, LEAKY_SLOPE, NORM_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    /// Raw regression output.
    Linear,
    /// Squashed to `(0, 1)`.
    Sigmoid,
}

/// Encoder-decoder with skip connections. Encoder stage `i` halves the
/// spatial size; decoder stage `j` doubles it and concatenates encoder
/// output `depth − j`, where encoder output 0 is the input stack.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub head: OutputHead,
    pub params: ParamSet<T>,
}

/// Channel width of encoder stage `i`.
fn stage_width(base: usize, i: usize) -> usize {
    base << i.min(3)
}

pub fn build_unet<T: Scalar>(
    in_channels: usize,
    base_width: usize,
    depth: usize,
    head: OutputHead,
    seed: u64,
) -> Result<UNet<T>> {
    if in_channels == 0 || base_width == 0 || depth == 0 {
        return Err(Error::Config(
            "in_channels, base_width and depth must all be positive".into(),
        ));
    }
    let mut init = Init::new(seed);
    let mut params = ParamSet::new();
    let widths: Vec<usize> = (0..depth).map(|i| stage_width(base_width, i)).collect();
    let mut prev = in_channels;
    for (i, &w) in widths.iter().enumerate() {
        params.push(format!("enc{i}.weight"), init.gaussian([w, prev, 4, 4]));
        params.push(format!("enc{i}.gain"), Array::full([1, w, 1, 1], T::one()));
        params.push(format!("enc{i}.shift"), Array::zeros([1, w, 1, 1]));
        prev = w;
    }
    let skip = |i: usize| if i == 0 { in_channels } else { widths[i - 1] };
    for j in 1..=depth {
        let out = widths[(depth - j).saturating_sub(1)];
        // Transposed-conv weights are stored as the adjoint conv's `C_in×C_out`.
        params.push(format!("dec{j}.weight"), init.gaussian([prev, out, 4, 4]));
        params.push(format!("dec{j}.gain"), Array::full([1, out, 1, 1], T::one()));
        params.push(format!("dec{j}.shift"), Array::zeros([1, out, 1, 1]));
        prev = out + skip(depth - j);
    }
    params.push("head.weight", init.gaussian([1, prev, 1, 1]));
    params.push("head.bias", Array::zeros([1, 1, 1, 1]));
    Ok(UNet {
        in_channels,
        base_width,
        depth,
        head,
        params,
    })
}

impl<T: Scalar> UNet<T> {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| stage_width(self.base_width, i)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Spatial size at the bottleneck; errors unless both extents are
    /// divisible by `2^depth`.
    pub fn bottleneck_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = 1usize << self.depth;
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "input {height}×{width} is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok((height / f, width / f))
    }

    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        self.bottleneck_size(h, w)?;
        let slope = T::lit(LEAKY_SLOPE);
        let eps = T::lit(NORM_EPS);
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter layout");
        let mut skips = vec![x];
        let mut cur = x;
        for _ in 0..self.depth {
            let (wt, gain, shift) = (next(), next(), next());
            cur = g.conv2d(cur, wt, None, 2, 1)?;
            cur = g.instance_norm(cur, gain, shift, eps)?;
            cur = g.leaky_relu(cur, slope)?;
            skips.push(cur);
        }
        for j in 1..=self.depth {
            let (wt, gain, shift) = (next(), next(), next());
            cur = g.conv_transpose2d(cur, wt, None, 2, 1)?;
            cur = g.instance_norm(cur, gain, shift, eps)?;
            cur = g.relu(cur)?;
            cur = g.concat_channels(cur, skips[self.depth - j])?;
        }
        let (hw, hb) = (next(), next());
        let out = g.conv2d(cur, hw, Some(hb), 1, 0)?;
        Ok(match self.head {
            OutputHead::Linear => out,
            OutputHead::Sigmoid => g.sigmoid(out)?,
        })
    }

    /// Forward pass without gradient tracking; returns `N×1×H×W`.
    pub fn predict(&self, stack: &Array<T>) -> Result<Array<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let x = g.constant(stack.clone());
        let y = self.forward(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}
