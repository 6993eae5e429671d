use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::{sign, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, pad: 0, groups: 1 }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    Conv2d { input: usize, weight: usize, geom: ConvGeometry },
    ChannelBias { input: usize, bias: usize },
    Relu(usize),
    AvgPool { input: usize, size: usize },
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    L1(usize),
    L2(usize),
    Dot(usize, usize),
    Resize(usize),
    ZeroPad { input: usize, top: usize, left: usize },
    Reshape(usize),
    Select { input: usize, index: usize },
    ForwardOnly { name: &'static str },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Some leaf upstream of this node requires a gradient.
    tracks: bool,
}

/// Records primitive operations so that [`Tape::backward`] can propagate
/// adjoints from a scalar output to every leaf that requires a gradient.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and the reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients of a scalar output w.r.t. the leaves that requested them.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<Var, Tensor>,
}

impl GradMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient will be reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { requires_grad: true }, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { requires_grad: false }, value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[self.checked(var).expect("variable from another tape")].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.checked(var)?].value)
    }

    fn checked(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(var.index)
    }

    fn push(&mut self, op: Op, value: Tensor, tracks: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { op, value, tracks });
        Var { tape: self.id, index }
    }

    fn tracks(&self, i: usize) -> bool {
        self.nodes[i].tracks
    }

    fn unary(&mut self, a: Var, op: impl FnOnce(usize) -> Op, value: Tensor) -> Result<Var> {
        let i = self.checked(a)?;
        let tracks = self.tracks(i);
        Ok(self.push(op(i), value, tracks))
    }

    fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
        match t.data().iter().find(|v| !v.is_finite()) {
            Some(&value) => Err(Error::NonFinite { context: op, value }),
            None => Ok(t),
        }
    }

    // Elementwise binary op with scalar broadcasting on either side.
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ib) = (self.checked(a)?, self.checked(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, name, &f)?
        } else if vb.is_scalar() {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else if va.is_scalar() {
            let s = va.item();
            vb.map(|y| f(s, y))
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        };
        let value = Self::finite(name, value)?;
        let tracks = self.tracks(ia) || self.tracks(ib);
        Ok(self.push(make(ia, ib), value, tracks))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.try_value(a)?.map(|x| x + s);
        self.unary(a, Op::AddScalar, v)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.try_value(a)?.map(|x| x * s);
        self.unary(a, |i| Op::MulScalar(i, s), v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.checked(a)?, self.checked(b)?);
        let value = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let tracks = self.tracks(ia) || self.tracks(ib);
        Ok(self.push(Op::MatMul(ia, ib), value, tracks))
    }

    /// Cross-correlation of a `(C, H, W)` input with weights `(O, C/groups, kH, kW)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, params: Conv2dParams) -> Result<Var> {
        let (ii, iw) = (self.checked(input)?, self.checked(weight)?);
        let (x, w) = (&self.nodes[ii].value, &self.nodes[iw].value);
        let geom = ConvGeometry::new(x, w, params.stride, params.pad, params.groups)?;
        let value = kernels::conv2d(x, w, &geom);
        let tracks = self.tracks(ii) || self.tracks(iw);
        Ok(self.push(Op::Conv2d { input: ii, weight: iw, geom }, value, tracks))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (ii, ib) = (self.checked(input)?, self.checked(bias)?);
        let (x, b) = (&self.nodes[ii].value, &self.nodes[ib].value);
        let (c, h, w) = x.chw("channel_bias")?;
        if b.shape() != [c] {
            return Err(Error::shape("channel_bias", format!("bias {:?} for {c} channels", b.shape())));
        }
        let mut out = x.data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += b.data()[ch]);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let tracks = self.tracks(ii) || self.tracks(ib);
        Ok(self.push(Op::ChannelBias { input: ii, bias: ib }, value, tracks))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.try_value(a)?.map(|x| x.max(0.0));
        self.unary(a, Op::Relu, v)
    }

    pub fn avg_pool(&mut self, a: Var, size: usize) -> Result<Var> {
        let v = kernels::avg_pool(self.try_value(a)?, size)?;
        self.unary(a, |input| Op::AvgPool { input, size }, v)
    }

    /// Softmax over all entries of the tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.try_value(a)?;
        let v = Tensor::from_parts(x.shape().to_vec(), softmax(x.data()));
        self.unary(a, Op::Softmax, v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.try_value(a)?;
        let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.data().iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let v = x.map(|z| z - lse);
        self.unary(a, Op::LogSoftmax, v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = Self::finite("log", self.try_value(a)?.map(f64::ln))?;
        self.unary(a, Op::Log, v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = Self::finite("exp", self.try_value(a)?.map(f64::exp))?;
        self.unary(a, Op::Exp, v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = Self::finite("sqrt", self.try_value(a)?.map(f64::sqrt))?;
        self.unary(a, Op::Sqrt, v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.try_value(a)?.sum());
        self.unary(a, Op::Sum, v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.try_value(a)?.mean());
        self.unary(a, Op::Mean, v)
    }

    /// Gradient passes through (factor 1) on `[lo, hi]` inclusive and is 0 outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        let v = self.try_value(a)?.map(|x| x.clamp(lo, hi));
        self.unary(a, |input| Op::Clamp { input, lo, hi }, v)
    }

    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.try_value(a)?.l1_norm());
        self.unary(a, Op::L1, v)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.try_value(a)?.l2_norm());
        self.unary(a, Op::L2, v)
    }

    /// Flattened inner product of two same-shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.checked(a)?, self.checked(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        va.expect_same_shape(vb, "dot")?;
        let v = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum());
        let tracks = self.tracks(ia) || self.tracks(ib);
        Ok(self.push(Op::Dot(ia, ib), v, tracks))
    }

    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = kernels::resize_bilinear(self.try_value(a)?, out_h, out_w)?;
        self.unary(a, Op::Resize, v)
    }

    pub fn zero_pad(&mut self, a: Var, out_h: usize, out_w: usize, top: usize, left: usize) -> Result<Var> {
        let v = kernels::zero_pad(self.try_value(a)?, out_h, out_w, top, left)?;
        self.unary(a, |input| Op::ZeroPad { input, top, left }, v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.try_value(a)?.reshape(shape)?;
        self.unary(a, Op::Reshape, v)
    }

    /// Single entry (flat index) as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let x = self.try_value(a)?;
        if index >= x.numel() {
            return Err(Error::shape("select", format!("index {index} out of {}", x.numel())));
        }
        let v = Tensor::scalar(x.data()[index]);
        self.unary(a, |input| Op::Select { input, index }, v)
    }

    /// Elementwise sign. Forward-only: a backward pass that reaches this node
    /// through a gradient-tracking input fails instead of returning zeros.
    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let i = self.checked(a)?;
        let v = self.nodes[i].value.sign();
        let tracks = self.tracks(i);
        Ok(self.push(Op::ForwardOnly { name: "sign" }, v, tracks))
    }

    pub fn backward(&self, output: Var) -> Result<GradMap> {
        let out = self.checked(output)?;
        let out_value = &self.nodes[out].value;
        if !out_value.is_scalar() {
            return Err(Error::NonScalarOutput { shape: out_value.shape().to_vec() });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; out + 1];
        adj[out] = Some(Tensor::from_parts(out_value.shape().to_vec(), vec![1.0]));
        let mut grads = GradMap::default();

        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
            if let Op::Leaf { requires_grad: true } = node.op {
                grads.grads.insert(Var { tape: self.id, index: i }, g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: true } = node.op {
                grads.grads.entry(Var { tape: self.id, index: i }).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let val = |j: usize| &self.nodes[j].value;
        let mut send = |j: usize, grad: Tensor| {
            if self.nodes[j].tracks {
                accumulate(&mut adj[j], grad);
            }
        };
        match self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                send(a, unbroadcast(g.clone(), val(a)));
                send(b, unbroadcast(g.clone(), val(b)));
            }
            Op::Sub(a, b) => {
                send(a, unbroadcast(g.clone(), val(a)));
                send(b, unbroadcast(g.map(|v| -v), val(b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.tracks(a) {
                    send(a, unbroadcast(broadcast_zip(g, vb, |g, y| g * y), va));
                }
                if self.tracks(b) {
                    send(b, unbroadcast(broadcast_zip(g, va, |g, x| g * x), vb));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.tracks(a) {
                    send(a, unbroadcast(broadcast_zip(g, vb, |g, y| g / y), va));
                }
                if self.tracks(b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let out = &self.nodes[i].value;
                    let t = out.zip_map(g, "div", |o, g| -o * g).expect("same shape");
                    send(b, unbroadcast(broadcast_zip(&t, vb, |t, y| t / y), vb));
                }
            }
            Op::AddScalar(a) => send(a, g.clone()),
            Op::MulScalar(a, s) => send(a, g.map(|v| v * s)),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.tracks(a) {
                    send(a, kernels::matmul(g, &kernels::transpose(vb))?);
                }
                if self.tracks(b) {
                    send(b, kernels::matmul(&kernels::transpose(va), g)?);
                }
            }
            Op::Conv2d { input, weight, geom } => {
                let (gx, gw) = kernels::conv2d_backward(
                    val(input),
                    val(weight),
                    g,
                    &geom,
                    self.tracks(input),
                    self.tracks(weight),
                );
                if let Some(gx) = gx {
                    send(input, gx);
                }
                if let Some(gw) = gw {
                    send(weight, gw);
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.tracks(bias) {
                    let c = val(bias).numel();
                    let plane = g.numel() / c;
                    let gb = g.data().chunks(plane).map(|p| p.iter().sum()).collect();
                    send(bias, Tensor::vector(gb));
                }
                send(input, g.clone());
            }
            Op::Relu(a) => send(a, g.zip_map(val(a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })?),
            Op::AvgPool { input, size } => send(input, kernels::avg_pool_backward(val(input).shape(), g, size)),
            Op::Softmax(a) => {
                let s = &self.nodes[i].value;
                let gs: f64 = g.data().iter().zip(s.data()).map(|(g, s)| g * s).sum();
                send(a, s.zip_map(g, "softmax", |s, g| s * (g - gs))?);
            }
            Op::LogSoftmax(a) => {
                let out = &self.nodes[i].value;
                let gsum = g.sum();
                send(a, out.zip_map(g, "log_softmax", |o, g| g - o.exp() * gsum)?);
            }
            Op::Log(a) => send(a, g.zip_map(val(a), "log", |g, x| g / x)?),
            Op::Exp(a) => send(a, g.zip_map(&self.nodes[i].value, "exp", |g, y| g * y)?),
            Op::Sqrt(a) => send(a, g.zip_map(&self.nodes[i].value, "sqrt", |g, y| g * 0.5 / y)?),
            Op::Sum(a) => send(a, Tensor::full(val(a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(a).numel() as f64;
                send(a, Tensor::full(val(a).shape(), g.item() / n));
            }
            Op::Clamp { input, lo, hi } => {
                send(input, g.zip_map(val(input), "clamp", |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 })?)
            }
            Op::L1(a) => send(a, val(a).map(|x| sign(x) * g.item())),
            Op::L2(a) => {
                let norm = self.nodes[i].value.item();
                let gi = g.item();
                send(a, val(a).map(|x| if norm > 0.0 { gi * x / norm } else { 0.0 }));
            }
            Op::Dot(a, b) => {
                let gi = g.item();
                send(a, val(b).map(|y| gi * y));
                send(b, val(a).map(|x| gi * x));
            }
            Op::Resize(a) => send(a, kernels::resize_bilinear_backward(val(a).shape(), g)),
            Op::ZeroPad { input, top, left } => {
                let [_, h, w] = val(input).shape()[..] else { unreachable!() };
                send(input, kernels::crop(g, top, left, h, w));
            }
            Op::Reshape(a) => send(a, Tensor::from_parts(val(a).shape().to_vec(), g.data().to_vec())),
            Op::Select { input, index } => {
                let mut t = Tensor::zeros(val(input).shape());
                t.data_mut()[index] = g.item();
                send(input, t);
            }
            Op::ForwardOnly { name } => return Err(Error::NonDifferentiable { op: name }),
        }
        Ok(())
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, g)| *a += g),
        None => *slot = Some(grad),
    }
}

// `g` has the output shape; `other` is either that shape or a scalar.
fn broadcast_zip(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if other.is_scalar() && g.shape() != other.shape() {
        let s = other.item();
        g.map(|v| f(v, s))
    } else if g.is_scalar() && g.shape() != other.shape() {
        let gv = g.item();
        other.map(|o| f(gv, o))
    } else {
        g.zip_map(other, "broadcast", f).expect("shapes validated at record time")
    }
}

/// Reduce an adjoint computed at the broadcast shape back onto `target`.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else if target.is_scalar() {
        Tensor::from_parts(target.shape().to_vec(), vec![g.sum()])
    } else {
        // scalar adjoint from a scalar output feeding a broadcast tensor operand
        Tensor::full(target.shape(), g.item())
    }
}
