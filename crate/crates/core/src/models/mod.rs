//! Intensity predictors: a U-Net regressor and a Pix2Pix conditional GAN
//! with a PatchGAN discriminator.

mod checkpoint;
mod patchgan;
mod unet;

use std::fmt;
use std::str::FromStr;

use intensim_tensor::{Adam, Array, Graph, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, Descriptor, CHECKPOINT_MAGIC};
pub use patchgan::{patchgan_receptive_field, PatchGan, PATCHGAN_LAYERS};
pub use unet::{build_unet, OutputHead, UNet};

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    UNet,
    Pix2Pix,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::UNet => "unet",
            ArchKind::Pix2Pix => "pix2pix",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unet" | "u-net" => Ok(ArchKind::UNet),
            "pix2pix" => Ok(ArchKind::Pix2Pix),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Inserts every tensor into `g`, tracked for gradients when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| g.leaf(v.clone(), trainable))
            .collect()
    }

    /// Gradients of the bound tensors after [`Graph::backward`]; unused
    /// parameters get zeros.
    pub fn collect_grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Array<T>> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub(crate) fn gaussian<T: Scalar>(&mut self, shape: [usize; 4]) -> Array<T> {
        Array::from_fn(shape, |_| T::lit(self.normal.sample(&mut self.rng)))
    }
}

/// Per-channel input standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation of each channel over all pixels of the
    /// given `1×C×H×W` stacks. Near-constant channels get unit scale.
    pub fn fit<'a, T: Scalar, I>(stacks: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Array<T>>,
    {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in stacks {
            let [n, c, h, w] = s.shape();
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::Shape(format!(
                    "stack has {c} channels, expected {}",
                    sum.len()
                )));
            }
            for b in 0..n {
                for ch in 0..c {
                    for &v in s.plane(b, ch) {
                        let v = v.as_f64();
                        sum[ch] += v;
                        sq[ch] += v * v;
                    }
                }
            }
            count += n * h * w;
        }
        if count == 0 {
            return Err(Error::EmptyInput("no frames to fit normalization"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() > 1e-6 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<T: Scalar>(&self, x: &Array<T>) -> Result<Array<T>> {
        let [n, c, _, _] = x.shape();
        if c != self.mean.len() {
            return Err(Error::Shape(format!(
                "normalization has {} channels, input has {c}",
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                for v in out.plane_mut(b, ch) {
                    *v = T::lit((v.as_f64() - m) / s);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    MaskedL2,
    Pix2Pix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainObjective {
    pub kind: ObjectiveKind,
    /// Weight of the masked L1 term.
    pub lambda: f64,
    /// Coefficient of the R1 penalty on real pairs.
    pub gp_coeff: f64,
}

impl TrainObjective {
    pub fn masked_l2() -> Self {
        Self {
            kind: ObjectiveKind::MaskedL2,
            lambda: 0.0,
            gp_coeff: 0.0,
        }
    }

    pub fn pix2pix(lambda: f64, gp_coeff: f64) -> Self {
        Self {
            kind: ObjectiveKind::Pix2Pix,
            lambda,
            gp_coeff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.gp_coeff >= 0.0 && self.gp_coeff.is_finite()) {
            return Err(Error::Config(format!("gp_coeff {} must be >= 0", self.gp_coeff)));
        }
        Ok(())
    }
}

fn check_batch<T: Scalar>(stack: &Array<T>, target: &Array<T>, mask: &Array<T>) -> Result<()> {
    let [n, _, h, w] = stack.shape();
    for (name, a) in [("target", target), ("mask", mask)] {
        if a.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "{name} has shape {:?}, expected {:?}",
                a.shape(),
                [n, 1, h, w]
            )));
        }
    }
    Ok(())
}

fn fault(what: &str, e: intensim_tensor::TensorError) -> Error {
    match e {
        intensim_tensor::TensorError::NonFinite(op) => {
            Error::TrainingFault(format!("non-finite value in {op} during {what}"))
        }
        other => Error::Tensor(other),
    }
}

/// Masked MSE of the U-Net on one batch: `Σ (I − Î)² · B / Σ B`.
pub fn unet_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &UNet<T>,
    params: &[Var],
    stack: &Array<T>,
    target: &Array<T>,
    mask: &Array<T>,
) -> Result<Var> {
    check_batch(stack, target, mask)?;
    let x = g.constant(stack.clone());
    let pred = model.forward(g, params, x)?;
    let t = g.constant(target.clone());
    let m = g.constant(mask.clone());
    Ok(g.masked_mse(pred, t, m)?)
}

/// One optimizer step on the masked MSE; returns the batch loss.
pub fn unet_step<T: Scalar>(
    model: &mut UNet<T>,
    opt: &mut Adam<T>,
    stack: &Array<T>,
    target: &Array<T>,
    mask: &Array<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true);
    let loss = unet_loss(&mut g, model, &vars, stack, target, mask).map_err(|e| match e {
        Error::Tensor(t) => fault("forward pass", t),
        other => other,
    })?;
    g.backward(loss).map_err(|e| fault("backward pass", e))?;
    let grads = model.params.collect_grads(&g, &vars);
    opt.step(model.params.values_mut(), &grads)?;
    if !model.params.all_finite() {
        return Err(Error::TrainingFault("non-finite parameter after update".into()));
    }
    Ok(g.value(loss).item().as_f64())
}

/// Loss terms of one adversarial step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLogs {
    pub d_real_bce: f64,
    pub d_fake_bce: f64,
    pub r1: f64,
    pub d_loss: f64,
    pub g_adv_bce: f64,
    pub g_l1: f64,
    pub g_loss: f64,
}

/// One discriminator update followed by one generator update against the
/// updated discriminator. The discriminator sees intensity planes masked by
/// `B`, so unhit pixels carry no signal for either side.
#[allow(clippy::too_many_arguments)]
pub fn pix2pix_step<T: Scalar>(
    gen: &mut UNet<T>,
    disc: &mut PatchGan<T>,
    gen_opt: &mut Adam<T>,
    disc_opt: &mut Adam<T>,
    stack: &Array<T>,
    target: &Array<T>,
    mask: &Array<T>,
    obj: &TrainObjective,
) -> Result<StepLogs> {
    if obj.kind != ObjectiveKind::Pix2Pix {
        return Err(Error::Config("pix2pix_step needs a pix2pix objective".into()));
    }
    obj.validate()?;
    check_batch(stack, target, mask)?;
    let mut logs = StepLogs::default();

    let mut gg = Graph::new();
    let gen_vars = gen.params.bind(&mut gg, true);
    let x = gg.constant(stack.clone());
    let pred = gen.forward(&mut gg, &gen_vars, x).map_err(|e| tensor_fault(e, "generator forward"))?;
    let m = gg.constant(mask.clone());
    let fake = gg.mul(pred, m).map_err(|e| fault("generator forward", e))?;
    let fake_value = gg.value(fake).clone();

    {
        let mut g = Graph::new();
        let dv = disc.params.bind(&mut g, true);
        let run = |g: &mut Graph<T>| -> Result<(Var, Var, Var, Var)> {
            let cond = g.constant(stack.clone());
            let real_i = g.param(target.zip_map(mask, |a, b| a * b));
            let real_in = g.concat_channels(cond, real_i)?;
            let real_logits = disc.forward(g, &dv, real_in)?;
            let fake_i = g.constant(fake_value.clone());
            let fake_in = g.concat_channels(cond, fake_i)?;
            let fake_logits = disc.forward(g, &dv, fake_in)?;
            let ones = g.constant(Array::full(g.shape(real_logits), T::one()));
            let zeros = g.constant(Array::zeros(g.shape(fake_logits)));
            let real_bce = g.bce_with_logits(real_logits, ones)?;
            let fake_bce = g.bce_with_logits(fake_logits, zeros)?;
            let real_sum = g.sum(real_logits)?;
            let gi = g.gradients(real_sum, &[real_i])?[0];
            let gi2 = g.square(gi)?;
            let r1 = g.mean(gi2)?;
            let bce = g.add(real_bce, fake_bce)?;
            let pen = g.scale(r1, T::lit(obj.gp_coeff))?;
            let d_loss = g.add(bce, pen)?;
            Ok((real_bce, fake_bce, r1, d_loss))
        };
        let (real_bce, fake_bce, r1, d_loss) =
            run(&mut g).map_err(|e| tensor_fault(e, "discriminator step"))?;
        g.backward(d_loss).map_err(|e| fault("discriminator backward", e))?;
        logs.d_real_bce = g.value(real_bce).item().as_f64();
        logs.d_fake_bce = g.value(fake_bce).item().as_f64();
        logs.r1 = g.value(r1).item().as_f64();
        logs.d_loss = g.value(d_loss).item().as_f64();
        let grads = disc.params.collect_grads(&g, &dv);
        disc_opt.step(disc.params.values_mut(), &grads)?;
        if !disc.params.all_finite() {
            return Err(Error::TrainingFault("non-finite discriminator parameter".into()));
        }
    }

    let dv = disc.params.bind(&mut gg, false);
    let run = |g: &mut Graph<T>| -> Result<(Var, Var, Var)> {
        let fake_in = g.concat_channels(x, fake)?;
        let logits = disc.forward(g, &dv, fake_in)?;
        let ones = g.constant(Array::full(g.shape(logits), T::one()));
        let adv = g.bce_with_logits(logits, ones)?;
        let t = g.constant(target.clone());
        let l1 = g.masked_l1(pred, t, m)?;
        let weighted = g.scale(l1, T::lit(obj.lambda))?;
        let loss = g.add(adv, weighted)?;
        Ok((adv, l1, loss))
    };
    let (adv, l1, g_loss) = run(&mut gg).map_err(|e| tensor_fault(e, "generator step"))?;
    gg.backward(g_loss).map_err(|e| fault("generator backward", e))?;
    logs.g_adv_bce = gg.value(adv).item().as_f64();
    logs.g_l1 = gg.value(l1).item().as_f64();
    logs.g_loss = gg.value(g_loss).item().as_f64();
    let grads = gen.params.collect_grads(&gg, &gen_vars);
    gen_opt.step(gen.params.values_mut(), &grads)?;
    if !gen.params.all_finite() {
        return Err(Error::TrainingFault("non-finite generator parameter".into()));
    }
    Ok(logs)
}

fn tensor_fault(e: Error, what: &str) -> Error {
    match e {
        Error::Tensor(t) => fault(what, t),
        other => other,
    }
}
