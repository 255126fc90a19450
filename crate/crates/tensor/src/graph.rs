//! Arena-backed computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the arena index is already a
//! topological order. Backward passes are themselves recorded as graph
//! operations, which makes gradients differentiable (needed for gradient
//! penalties) at no extra cost in the first-order case.

use crate::conv::{self, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::{numel, Array, Scalar, Shape};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Broadcast(Var),
    SumTo(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Powf(Var, T),
    BceWithLogits(Var, Var),
    Conv2d(Var, Var, ConvGeometry),
    ConvTranspose2d(Var, Var, ConvGeometry),
    ConvWeightGrad(Var, Var, ConvGeometry),
    Concat(Var, Var),
    SliceChannels(Var, usize),
    EmbedChannels(Var, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Broadcast(..) => "broadcast",
            Op::SumTo(..) => "sum_to",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Abs(..) => "abs",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Powf(..) => "powf",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::Conv2d(..) => "conv2d",
            Op::ConvTranspose2d(..) => "conv_transpose2d",
            Op::ConvWeightGrad(..) => "conv2d_weight_grad",
            Op::Concat(..) => "concat_channels",
            Op::SliceChannels(..) => "slice_channels",
            Op::EmbedChannels(..) => "embed_channels",
        }
    }
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Array<T>>,
}

/// A single-threaded computation graph. Build one per training step and
/// drop it afterwards.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_compatible(from: Shape, to: Shape) -> bool {
    from.iter().zip(&to).all(|(&f, &t)| f == t || f == 1)
}

/// Strides of `from` when read with the indices of a larger shape; broadcast
/// axes get stride zero.
fn broadcast_strides(from: Shape) -> [usize; 4] {
    let mut strides = [0; 4];
    let mut acc = 1;
    for axis in (0..4).rev() {
        strides[axis] = if from[axis] == 1 { 0 } else { acc };
        acc *= from[axis];
    }
    strides
}

fn broadcast_value<T: Scalar>(a: &Array<T>, to: Shape) -> Array<T> {
    if a.shape() == to {
        return a.clone();
    }
    let s = broadcast_strides(a.shape());
    let src = a.data();
    let mut out = Vec::with_capacity(numel(to));
    for n in 0..to[0] {
        for c in 0..to[1] {
            let base = n * s[0] + c * s[1];
            for h in 0..to[2] {
                let row = base + h * s[2];
                for w in 0..to[3] {
                    out.push(src[row + w * s[3]]);
                }
            }
        }
    }
    Array::from_vec(to, out).expect("broadcast length")
}

fn sum_to_value<T: Scalar>(a: &Array<T>, to: Shape) -> Array<T> {
    if a.shape() == to {
        return a.clone();
    }
    let s = broadcast_strides(to);
    let from = a.shape();
    let mut acc = vec![0.0f64; numel(to)];
    let src = a.data();
    let mut i = 0;
    for n in 0..from[0] {
        for c in 0..from[1] {
            let base = n * s[0] + c * s[1];
            for h in 0..from[2] {
                let row = base + h * s[2];
                for w in 0..from[3] {
                    acc[row + w * s[3]] += src[i].as_f64();
                    i += 1;
                }
            }
        }
    }
    Array::from_vec(to, acc.into_iter().map(T::lit).collect()).expect("sum_to length")
}

fn bce_elementwise(x: f64, z: f64) -> f64 {
    x.max(0.0) - x * z + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Inserts an input tensor.
    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, operands: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Repeats size-1 axes of `a` up to `to`.
    pub fn broadcast(&mut self, a: Var, to: Shape) -> Result<Var> {
        let from = self.shape(a);
        if from == to {
            return Ok(a);
        }
        if !broadcast_compatible(from, to) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: from,
                rhs: to,
            });
        }
        let value = broadcast_value(self.value(a), to);
        self.push(value, Op::Broadcast(a), &[a])
    }

    /// Sums `a` down to `to`; the adjoint of [`Graph::broadcast`].
    pub fn sum_to(&mut self, a: Var, to: Shape) -> Result<Var> {
        let from = self.shape(a);
        if from == to {
            return Ok(a);
        }
        if !broadcast_compatible(to, from) {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: from,
                rhs: to,
            });
        }
        let value = sum_to_value(self.value(a), to);
        self.push(value, Op::SumTo(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.sum_to(a, [1, 1, 1, 1])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::lit(1.0 / n as f64))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > T::zero() {
                x
            } else {
                x * slope
            }
        })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    /// Mean binary cross-entropy of `logits` against `labels` in `[0, 1]`,
    /// evaluated as `max(x,0) − x·z + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Var) -> Result<Var> {
        self.same_shape("bce_with_logits", logits, labels)?;
        let x = self.value(logits);
        let z = self.value(labels);
        let n = x.numel().max(1) as f64;
        let total: f64 = x
            .data()
            .iter()
            .zip(z.data())
            .map(|(&a, &b)| bce_elementwise(a.as_f64(), b.as_f64()))
            .sum();
        let value = Array::scalar(T::lit(total / n));
        self.push(value, Op::BceWithLogits(logits, labels), &[logits, labels])
    }

    /// Convolution with optional per-channel bias of shape `1×C_out×1×1`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let g = ConvGeometry::new(stride, pad);
        let value = conv::conv2d(self.value(x), self.value(w), g)?;
        let y = self.push(value, Op::Conv2d(x, w, g), &[x, w])?;
        self.add_bias(y, bias)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let g = ConvGeometry::new(stride, pad);
        let value = conv::conv_transpose2d(self.value(x), self.value(w), g)?;
        let y = self.push(value, Op::ConvTranspose2d(x, w, g), &[x, w])?;
        self.add_bias(y, bias)
    }

    fn conv_weight_grad(&mut self, x: Var, gy: Var, g: ConvGeometry, k: usize) -> Result<Var> {
        let value = conv::conv2d_weight_grad(self.value(x), self.value(gy), k, g)?;
        self.push(value, Op::ConvWeightGrad(x, gy, g), &[x, gy])
    }

    fn add_bias(&mut self, y: Var, bias: Option<Var>) -> Result<Var> {
        match bias {
            None => Ok(y),
            Some(b) => {
                let shape = self.shape(y);
                let bb = self.broadcast(b, shape)?;
                self.add(y, bb)
            }
        }
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: sa,
                rhs: sb,
            });
        }
        let plane = sa[2] * sa[3];
        let mut data = Vec::with_capacity(numel(sa) + numel(sb));
        for n in 0..sa[0] {
            data.extend_from_slice(&self.value(a).data()[n * sa[1] * plane..(n + 1) * sa[1] * plane]);
            data.extend_from_slice(&self.value(b).data()[n * sb[1] * plane..(n + 1) * sb[1] * plane]);
        }
        let value = Array::from_vec([sa[0], sa[1] + sb[1], sa[2], sa[3]], data)?;
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s[1] {
            return Err(TensorError::InvalidArgument(format!(
                "slice_channels: {start}..{} out of {} channels",
                start + len,
                s[1]
            )));
        }
        let plane = s[2] * s[3];
        let mut data = Vec::with_capacity(s[0] * len * plane);
        for n in 0..s[0] {
            let base = (n * s[1] + start) * plane;
            data.extend_from_slice(&self.value(a).data()[base..base + len * plane]);
        }
        let value = Array::from_vec([s[0], len, s[2], s[3]], data)?;
        self.push(value, Op::SliceChannels(a, start), &[a])
    }

    /// Zero-pads channels so that `a` occupies `start..start+C_a` of `total`.
    pub fn embed_channels(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + s[1] > total {
            return Err(TensorError::InvalidArgument(format!(
                "embed_channels: {} channels at {start} exceed {total}",
                s[1]
            )));
        }
        let plane = s[2] * s[3];
        let mut value = Array::zeros([s[0], total, s[2], s[3]]);
        for n in 0..s[0] {
            let src = &self.nodes[a.0].value.data()[n * s[1] * plane..(n + 1) * s[1] * plane];
            let base = (n * total + start) * plane;
            value.data_mut()[base..base + s[1] * plane].copy_from_slice(src);
        }
        self.push(value, Op::EmbedChannels(a, start), &[a])
    }

    fn step_mask(&mut self, a: Var, f: impl Fn(T) -> T) -> Var {
        let mask = self.value(a).map(f);
        self.constant(mask)
    }

    /// Gradients of `node`'s output with respect to each operand that
    /// requires one, expressed as new graph nodes.
    fn backward_node(&mut self, node: usize, gy: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[node].op.clone();
        let out = Var(node);
        let mut grads = Vec::with_capacity(2);
        let rg = |g: &Self, v: Var| g.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(self, a) {
                    grads.push((a, gy));
                }
                if rg(self, b) {
                    grads.push((b, gy));
                }
            }
            Op::Sub(a, b) => {
                if rg(self, a) {
                    grads.push((a, gy));
                }
                if rg(self, b) {
                    let g = self.neg(gy)?;
                    grads.push((b, g));
                }
            }
            Op::Mul(a, b) => {
                if rg(self, a) {
                    let g = self.mul(gy, b)?;
                    grads.push((a, g));
                }
                if rg(self, b) {
                    let g = self.mul(gy, a)?;
                    grads.push((b, g));
                }
            }
            Op::Scale(a, c) => {
                let g = self.scale(gy, c)?;
                grads.push((a, g));
            }
            Op::AddScalar(a) => grads.push((a, gy)),
            Op::Broadcast(a) => {
                let s = self.shape(a);
                let g = self.sum_to(gy, s)?;
                grads.push((a, g));
            }
            Op::SumTo(a) => {
                let s = self.shape(a);
                let g = self.broadcast(gy, s)?;
                grads.push((a, g));
            }
            Op::Relu(a) => {
                let m = self.step_mask(a, |x| if x > T::zero() { T::one() } else { T::zero() });
                let g = self.mul(gy, m)?;
                grads.push((a, g));
            }
            Op::LeakyRelu(a, slope) => {
                let m = self.step_mask(a, |x| if x > T::zero() { T::one() } else { slope });
                let g = self.mul(gy, m)?;
                grads.push((a, g));
            }
            Op::Abs(a) => {
                let m = self.step_mask(a, |x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                let g = self.mul(gy, m)?;
                grads.push((a, g));
            }
            Op::Tanh(a) => {
                let t2 = self.mul(out, out)?;
                let neg = self.neg(t2)?;
                let d = self.add_scalar(neg, T::one())?;
                let g = self.mul(gy, d)?;
                grads.push((a, g));
            }
            Op::Sigmoid(a) => {
                let neg = self.neg(out)?;
                let one_minus = self.add_scalar(neg, T::one())?;
                let d = self.mul(out, one_minus)?;
                let g = self.mul(gy, d)?;
                grads.push((a, g));
            }
            Op::Powf(a, p) => {
                let pm = self.powf(a, p - T::one())?;
                let d = self.scale(pm, p)?;
                let g = self.mul(gy, d)?;
                grads.push((a, g));
            }
            Op::BceWithLogits(x, z) => {
                let shape = self.shape(x);
                let inv_n = T::lit(1.0 / numel(shape).max(1) as f64);
                let gb = self.broadcast(gy, shape)?;
                if rg(self, x) {
                    let s = self.sigmoid(x)?;
                    let diff = self.sub(s, z)?;
                    let d = self.scale(diff, inv_n)?;
                    let g = self.mul(gb, d)?;
                    grads.push((x, g));
                }
                if rg(self, z) {
                    let d = self.scale(x, -inv_n)?;
                    let g = self.mul(gb, d)?;
                    grads.push((z, g));
                }
            }
            Op::Conv2d(x, w, g) => {
                if rg(self, x) {
                    let v = self.nodes[gy.0].value.shape();
                    debug_assert_eq!(v, self.shape(out));
                    let gx = self.push_conv_transpose(gy, w, g)?;
                    grads.push((x, gx));
                }
                if rg(self, w) {
                    let k = self.shape(w)[2];
                    let gw = self.conv_weight_grad(x, gy, g, k)?;
                    grads.push((w, gw));
                }
            }
            Op::ConvTranspose2d(y, w, g) => {
                if rg(self, y) {
                    let gyy = self.push_conv(gy, w, g)?;
                    grads.push((y, gyy));
                }
                if rg(self, w) {
                    let k = self.shape(w)[2];
                    let gw = self.conv_weight_grad(gy, y, g, k)?;
                    grads.push((w, gw));
                }
            }
            Op::ConvWeightGrad(x, gy0, g) => {
                if rg(self, x) {
                    let gx = self.push_conv_transpose(gy0, gy, g)?;
                    grads.push((x, gx));
                }
                if rg(self, gy0) {
                    let gg = self.push_conv(x, gy, g)?;
                    grads.push((gy0, gg));
                }
            }
            Op::Concat(a, b) => {
                let ca = self.shape(a)[1];
                let cb = self.shape(b)[1];
                if rg(self, a) {
                    let g = self.slice_channels(gy, 0, ca)?;
                    grads.push((a, g));
                }
                if rg(self, b) {
                    let g = self.slice_channels(gy, ca, cb)?;
                    grads.push((b, g));
                }
            }
            Op::SliceChannels(a, start) => {
                let total = self.shape(a)[1];
                let g = self.embed_channels(gy, start, total)?;
                grads.push((a, g));
            }
            Op::EmbedChannels(a, start) => {
                let len = self.shape(a)[1];
                let g = self.slice_channels(gy, start, len)?;
                grads.push((a, g));
            }
        }
        Ok(grads)
    }

    fn push_conv(&mut self, x: Var, w: Var, g: ConvGeometry) -> Result<Var> {
        let value = conv::conv2d(self.value(x), self.value(w), g)?;
        self.push(value, Op::Conv2d(x, w, g), &[x, w])
    }

    fn push_conv_transpose(&mut self, y: Var, w: Var, g: ConvGeometry) -> Result<Var> {
        let value = conv::conv_transpose2d(self.value(y), self.value(w), g)?;
        self.push(value, Op::ConvTranspose2d(y, w, g), &[y, w])
    }

    /// Reverse sweep from `loss`. Returns the gradient node for every node
    /// index up to `loss` that received one.
    fn sweep(&mut self, loss: Var) -> Result<Vec<Option<Var>>> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        if !self.requires_grad(loss) {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let seed = self.constant(Array::full(shape, T::one()));
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (operand, g) in self.backward_node(i, gy)? {
                grads[operand.0] = Some(match grads[operand.0] {
                    None => g,
                    Some(prev) => self.add(prev, g)?,
                });
            }
        }
        Ok(grads)
    }

    /// Differentiable gradients of scalar `loss` with respect to `wrt`.
    /// Inputs that `loss` does not depend on get a zero constant.
    pub fn gradients(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let grads = self.sweep(loss)?;
        let mut out = Vec::with_capacity(wrt.len());
        for &v in wrt {
            match grads.get(v.0).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let z = Array::zeros(self.shape(v));
                    out.push(self.constant(z));
                }
            }
        }
        Ok(out)
    }

    /// Accumulates `d loss / d leaf` into the `grad` slot of every tracked
    /// leaf. Calling it twice without [`Graph::zero_grad`] adds up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let grads = self.sweep(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let gv = self.nodes[g.0].value.clone();
            let node = &mut self.nodes[i];
            node.grad = Some(match node.grad.take() {
                None => gv,
                Some(prev) => prev.zip_map(&gv, |a, b| a + b),
            });
        }
        Ok(())
    }
}
