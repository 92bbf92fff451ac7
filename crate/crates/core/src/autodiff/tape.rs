use crate::error::{bail, Result};
use crate::rng::splitmix64;
use crate::scalar::Scalar;

use super::conv::{upsample_backward, upsample_forward, ConvGeom};
use super::tensor::{strides, Tensor};

/// Reference to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Relu,
    Exp,
    Ln,
    Square,
}

enum Op<T> {
    Leaf,
    Constant,
    Binary { kind: BinaryOp, a: Var, b: Var },
    AddScalar(Var),
    MulScalar(Var, T),
    Unary { kind: UnaryOp, x: Var },
    Sum { x: Var, axes: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample { x: Var, factor: usize },
    InstanceNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Concat(Vec<Var>),
    Fill { x: Var, fill: Var, index: Vec<u32> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Marker in a fill index for positions that keep their input value.
pub const KEEP: u32 = u32::MAX;

/// Ordered record of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and [`Tape::backward`] can visit each node exactly once by walking the
/// record in reverse. Operations whose inputs need no gradient are stored as
/// constants without saved activations.
///
/// Leaf gradients *accumulate*: calling `backward` twice without
/// [`Tape::zero_grad`] sums both passes. The trainer builds a fresh tape per
/// step, so it never relies on this.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
    pieces: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if !t.all_finite() {
        bail!(Numeric, "non-finite value entering {}", what);
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true, pieces: None }
    }

    /// A tape that evaluates values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Starts fingerprinting relu branches; see [`Tape::piece_signature`].
    pub fn track_pieces(mut self) -> Self {
        self.pieces = Some(0);
        self
    }

    /// Fingerprint of the linear piece every relu so far was evaluated on, if
    /// tracking was enabled.
    ///
    /// Two evaluations of the same graph with equal fingerprints took the same
    /// branch at every element, up to hash collisions.
    pub fn piece_signature(&self) -> Option<u64> {
        self.pieces
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad {
            op
        } else {
            match op {
                Op::Leaf => Op::Leaf,
                _ => Op::Constant,
            }
        };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A learnable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies `x` into a new node that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- elementwise

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = if av.shape() == bv.shape() || bv.len() == 1 {
            av.shape().to_vec()
        } else if av.len() == 1 {
            bv.shape().to_vec()
        } else {
            bail!(
                Dimension,
                "{:?}: shapes {:?} and {:?} are neither equal nor scalar",
                kind,
                av.shape(),
                bv.shape()
            );
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (sa, sb) = (ad.len() == 1, bd.len() == 1);
        let f = |x: T, y: T| match kind {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data = (0..n)
            .map(|i| f(ad[if sa { 0 } else { i }], bd[if sb { 0 } else { i }]))
            .collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::MulScalar(x, s), rg)
    }

    pub fn unary(&mut self, kind: UnaryOp, x: Var) -> Var {
        let f = |v: T| match kind {
            UnaryOp::Neg => -v,
            UnaryOp::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            UnaryOp::Exp => v.exp(),
            UnaryOp::Ln => v.ln(),
            UnaryOp::Square => v * v,
        };
        let value = self.value(x).map(f);
        if let (UnaryOp::Relu, Some(pieces)) = (kind, self.pieces) {
            let node = (self.nodes.len() as u64) << 32;
            let active = self.value(x).data().iter().enumerate().filter(|(_, v)| **v > T::zero());
            let sig = active.fold(0u64, |h, (i, _)| h.wrapping_add(splitmix64(node | i as u64)));
            self.pieces = Some(pieces.wrapping_add(sig));
        }
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Ln, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }

    // ---------------------------------------------------------------- reductions

    /// Sums over `axes`. Reduced extents are kept as 1 when `keepdim` is set
    /// and removed otherwise; reducing every axis leaves shape `[1]`.
    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= in_shape.len()) {
            bail!(Dimension, "axis {} out of range for shape {:?}", bad, in_shape);
        }
        let kept = keepdim_shape(&in_shape, &axes);
        let mut out = vec![T::zero(); kept.iter().product()];
        let xd = self.value(x).data();
        match reduce_block(&in_shape, &axes) {
            Some((outer, red, 1)) => {
                for (o, chunk) in out.iter_mut().zip(xd.chunks_exact(red)).take(outer) {
                    *o = chunk.iter().fold(T::zero(), |a, &v| a + v);
                }
            }
            Some((outer, red, inner)) => {
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for r in 0..red {
                        let src = &xd[(o * red + r) * inner..(o * red + r + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            None => {
                for (&v, &o) in xd.iter().zip(&reduce_map(&in_shape, &axes)) {
                    out[o] += v;
                }
            }
        }
        let shape = if keepdim {
            kept
        } else {
            let s: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sum { x, axes }, rg))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x);
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            bail!(Dimension, "axis {} out of range for shape {:?}", bad, shape);
        }
        let mut axes_u = axes.to_vec();
        axes_u.sort_unstable();
        axes_u.dedup();
        let count: usize = axes_u.iter().map(|&a| shape[a]).product();
        let s = self.sum(x, &axes_u, keepdim)?;
        Ok(self.mul_scalar(s, T::one() / T::lit(count as f64)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes, false).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false).expect("all axes are valid")
    }

    // ---------------------------------------------------------------- channel softmax

    fn channel_layout(&self, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            bail!(Dimension, "channel op needs rank >= 2, got {:?}", s);
        }
        if s[1] < 2 {
            bail!(Dimension, "channel op needs at least 2 channels, got {:?}", s);
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    /// Softmax over axis 1, stabilised by subtracting the per-position maximum.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let (b, c, inner) = self.channel_layout(x)?;
        check_finite(self.value(x), "softmax")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        let d = xv.data();
        for bi in 0..b {
            let base = bi * c * inner;
            for v in 0..inner {
                let mx = (0..c).map(|ci| d[base + ci * inner + v]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ci in 0..c {
                    let e = (d[base + ci * inner + v] - mx).exp();
                    out[base + ci * inner + v] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[base + ci * inner + v] /= z;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Log-softmax over axis 1.
    pub fn log_softmax_channel(&mut self, x: Var) -> Result<Var> {
        let (b, c, inner) = self.channel_layout(x)?;
        check_finite(self.value(x), "log-softmax")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        let d = xv.data();
        for bi in 0..b {
            let base = bi * c * inner;
            for v in 0..inner {
                let mx = (0..c).map(|ci| d[base + ci * inner + v]).fold(T::neg_infinity(), T::max);
                let z: T = (0..c).map(|ci| (d[base + ci * inner + v] - mx).exp()).sum();
                let lse = mx + z.ln();
                for ci in 0..c {
                    out[base + ci * inner + v] = d[base + ci * inner + v] - lse;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    // ---------------------------------------------------------------- volumetric ops

    /// Direct 3D cross-correlation of `x: [B,Cin,D,H,W]` with `w: [Cout,Cin,kd,kh,kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                bail!(Dimension, "conv3d bias shape {:?}, expected [{}]", self.shape(b), geom.cout);
            }
        }
        let out = geom.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geom.output_shape(), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, rg))
    }

    pub fn upsample_nearest3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            bail!(Dimension, "upsample expects a 5-d tensor, got {:?}", s);
        }
        if factor == 0 {
            bail!(Shape, "upsample factor must be >= 1");
        }
        let out = upsample_forward(self.value(x).data(), &s, factor);
        let shape = vec![s[0], s[1], s[2] * factor, s[3] * factor, s[4] * factor];
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    /// Per-(sample, channel) normalisation over the trailing axes followed by
    /// a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gain: Var, shift: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            bail!(Dimension, "instance norm expects [B,C,spatial..], got {:?}", s);
        }
        let (b, c) = (s[0], s[1]);
        let n: usize = s[2..].iter().product();
        if n < 2 {
            bail!(Shape, "instance norm needs at least 2 spatial positions, got {:?}", s);
        }
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            bail!(Dimension, "instance norm affine parameters must have shape [{}]", c);
        }
        let xd = self.value(x).data();
        let (g, sh) = (self.value(gain).data(), self.value(shift).data());
        let nt = T::lit(n as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); b * c];
        for (p, plane) in xd.chunks(n).enumerate() {
            let ci = p % c;
            let mean = plane.iter().copied().sum::<T>() / nt;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for (j, &v) in plane.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[p * n + j] = h;
                out[p * n + j] = g[ci] * h + sh[ci];
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(&[x, gain, shift]);
        let (xhat, inv_std) = if rg && self.grad_enabled { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(value, Op::InstanceNorm { x, gain, shift, xhat, inv_std }, rg))
    }

    /// Concatenates `[B, Ci, ...]` tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Contract, "concat of zero tensors");
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            bail!(Dimension, "concat needs rank >= 2, got {:?}", s0);
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                bail!(Dimension, "concat shape mismatch: {:?} vs {:?}", s, s0);
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let mut out = Vec::with_capacity(s0[0] * channels * inner);
        for bi in 0..s0[0] {
            for &p in parts {
                let v = self.value(p);
                let per = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[bi * per..(bi + 1) * per]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// `out[i] = fill[index[i]]` where `index[i] != KEEP`, else `x[i]`.
    ///
    /// This is the primitive behind mask-token substitution: the gradient
    /// reaches `fill` only through replaced positions and `x` only through
    /// kept ones.
    pub fn fill_where(&mut self, x: Var, fill: Var, index: Vec<u32>) -> Result<Var> {
        let (xv, fv) = (self.value(x), self.value(fill));
        if index.len() != xv.len() {
            bail!(Dimension, "fill index has {} entries for {} values", index.len(), xv.len());
        }
        if let Some(&bad) = index.iter().find(|&&k| k != KEEP && k as usize >= fv.len()) {
            bail!(Dimension, "fill index {} out of range for {} fill values", bad, fv.len());
        }
        let data = xv
            .data()
            .iter()
            .zip(&index)
            .map(|(&v, &k)| if k == KEEP { v } else { fv.data()[k as usize] })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, fill]);
        Ok(self.push(value, Op::Fill { x, fill, index }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`, accumulating into every leaf that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        if !self.requires_grad(loss) {
            bail!(Contract, "loss does not depend on any tensor that requires a gradient");
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut send = |var: Var, t: Tensor<T>| {
                if self.nodes[var.0].requires_grad {
                    match &mut adj[var.0] {
                        Some(acc) => acc.add_assign(&t),
                        slot => *slot = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Leaf => match &mut self.grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Constant => {}
                Op::Binary { kind, a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    let (sa, sb) = (ad.len() == 1, bd.len() == 1);
                    let (a, b) = (*a, *b);
                    if !sa && !sb {
                        let (need_a, need_b) = (self.nodes[a.0].requires_grad, self.nodes[b.0].requires_grad);
                        let zip = |f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
                            gd.iter().zip(ad.iter().zip(bd)).map(|(&gi, (&x, &y))| f(gi, x, y)).collect()
                        };
                        if need_a {
                            let ga = match kind {
                                BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                                BinaryOp::Mul => zip(&|gi, _, y| gi * y),
                                BinaryOp::Div => zip(&|gi, _, y| gi / y),
                            };
                            send(a, Tensor::new(av.shape().to_vec(), ga)?);
                        }
                        if need_b {
                            let gb = match kind {
                                BinaryOp::Add => gd.to_vec(),
                                BinaryOp::Sub => gd.iter().map(|&gi| -gi).collect(),
                                BinaryOp::Mul => zip(&|gi, x, _| gi * x),
                                BinaryOp::Div => zip(&|gi, x, y| -gi * x / (y * y)),
                            };
                            send(b, Tensor::new(bv.shape().to_vec(), gb)?);
                        }
                        continue;
                    }
                    let mut ga = vec![T::zero(); ad.len()];
                    let mut gb = vec![T::zero(); bd.len()];
                    for (i, &gi) in gd.iter().enumerate() {
                        let (ia, ib) = (if sa { 0 } else { i }, if sb { 0 } else { i });
                        let (x, y) = (ad[ia], bd[ib]);
                        let (da, db) = match kind {
                            BinaryOp::Add => (gi, gi),
                            BinaryOp::Sub => (gi, -gi),
                            BinaryOp::Mul => (gi * y, gi * x),
                            BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                        };
                        ga[ia] += da;
                        gb[ib] += db;
                    }
                    send(a, Tensor::new(av.shape().to_vec(), ga)?);
                    send(b, Tensor::new(bv.shape().to_vec(), gb)?);
                }
                Op::AddScalar(x) => send(*x, g),
                Op::MulScalar(x, s) => {
                    let s = *s;
                    send(*x, g.map(|v| v * s));
                }
                Op::Unary { kind, x } => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(xv.data().iter().zip(yv.data()))
                        .map(|(&gi, (&xi, &yi))| match kind {
                            UnaryOp::Neg => -gi,
                            UnaryOp::Relu => {
                                if xi > T::zero() {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Exp => gi * yi,
                            UnaryOp::Ln => gi / xi,
                            UnaryOp::Square => gi * (xi + xi),
                        })
                        .collect();
                    send(*x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Sum { x, axes } => {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let gd = g.data();
                    let data = match reduce_block(&in_shape, axes) {
                        Some((outer, red, inner)) => {
                            let mut data = Vec::with_capacity(outer * red * inner);
                            for o in 0..outer {
                                for _ in 0..red {
                                    data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                                }
                            }
                            data
                        }
                        None => reduce_map(&in_shape, axes).iter().map(|&o| gd[o]).collect(),
                    };
                    send(*x, Tensor::new(in_shape, data)?);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let (b, c) = (y.shape()[0], y.shape()[1]);
                    let inner = y.len() / (b * c);
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = vec![T::zero(); y.len()];
                    for bi in 0..b {
                        let base = bi * c * inner;
                        for v in 0..inner {
                            let dot: T = (0..c).map(|ci| gd[base + ci * inner + v] * yd[base + ci * inner + v]).sum();
                            for ci in 0..c {
                                let k = base + ci * inner + v;
                                gx[k] = yd[k] * (gd[k] - dot);
                            }
                        }
                    }
                    send(*x, Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let (b, c) = (y.shape()[0], y.shape()[1]);
                    let inner = y.len() / (b * c);
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = vec![T::zero(); y.len()];
                    for bi in 0..b {
                        let base = bi * c * inner;
                        for v in 0..inner {
                            let total: T = (0..c).map(|ci| gd[base + ci * inner + v]).sum();
                            for ci in 0..c {
                                let k = base + ci * inner + v;
                                gx[k] = gd[k] - yd[k].exp() * total;
                            }
                        }
                    }
                    send(*x, Tensor::new(y.shape().to_vec(), gx)?);
                }
                Op::Conv3d { x, w, b, geom } => {
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let gd = g.data();
                    if self.nodes[x.0].requires_grad {
                        let gi = geom.backward_input(gd, wv.data());
                        send(*x, Tensor::new(xv.shape().to_vec(), gi)?);
                    }
                    if self.nodes[w.0].requires_grad {
                        let gw = geom.backward_weight(gd, xv.data());
                        send(*w, Tensor::new(wv.shape().to_vec(), gw)?);
                    }
                    if let Some(b) = b {
                        let gb = geom.backward_bias(gd);
                        send(*b, Tensor::new(vec![geom.cout], gb)?);
                    }
                }
                Op::Upsample { x, factor } => {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let gi = upsample_backward(g.data(), &in_shape, *factor);
                    send(*x, Tensor::new(in_shape, gi)?);
                }
                Op::InstanceNorm { x, gain, shift, xhat, inv_std } => {
                    let xs = self.nodes[x.0].value.shape().to_vec();
                    let c = xs[1];
                    let n: usize = xs[2..].iter().product();
                    let nt = T::lit(n as f64);
                    let gain_v = self.nodes[gain.0].value.data();
                    let gd = g.data();
                    let mut gx = vec![T::zero(); gd.len()];
                    let mut ggain = vec![T::zero(); c];
                    let mut gshift = vec![T::zero(); c];
                    for p in 0..gd.len() / n {
                        let ci = p % c;
                        let gp = &gd[p * n..(p + 1) * n];
                        let hp = &xhat[p * n..(p + 1) * n];
                        let mut sum_g = T::zero();
                        let mut sum_gh = T::zero();
                        for (&gv, &hv) in gp.iter().zip(hp) {
                            sum_g += gv;
                            sum_gh += gv * hv;
                        }
                        ggain[ci] += sum_gh;
                        gshift[ci] += sum_g;
                        let k = gain_v[ci] * inv_std[p] / nt;
                        for j in 0..n {
                            gx[p * n + j] = k * (nt * gp[j] - sum_g - hp[j] * sum_gh);
                        }
                    }
                    send(*x, Tensor::new(xs, gx)?);
                    send(*gain, Tensor::new(vec![c], ggain)?);
                    send(*shift, Tensor::new(vec![c], gshift)?);
                }
                Op::Concat(parts) => {
                    let s = g.shape().to_vec();
                    let inner: usize = s[2..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.nodes[p.0].value.shape().to_vec();
                        let cp = ps[1];
                        let mut data = Vec::with_capacity(ps.iter().product());
                        for bi in 0..s[0] {
                            let start = (bi * s[1] + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + cp * inner]);
                        }
                        offset += cp;
                        send(p, Tensor::new(ps, data)?);
                    }
                }
                Op::Fill { x, fill, index } => {
                    let fshape = self.nodes[fill.0].value.shape().to_vec();
                    let mut gf = vec![T::zero(); fshape.iter().product()];
                    let gx = g
                        .data()
                        .iter()
                        .zip(index)
                        .map(|(&gv, &k)| {
                            if k == KEEP {
                                gv
                            } else {
                                gf[k as usize] += gv;
                                T::zero()
                            }
                        })
                        .collect();
                    send(*x, Tensor::new(g.shape().to_vec(), gx)?);
                    send(*fill, Tensor::new(fshape, gf)?);
                }
            }
        }
        Ok(())
    }
}

fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if axes.contains(&i) { 1 } else { e })
        .collect()
}

/// `(outer, reduced, inner)` extents when `axes` (sorted) form one contiguous run.
fn reduce_block(shape: &[usize], axes: &[usize]) -> Option<(usize, usize, usize)> {
    let (&first, &last) = (axes.first()?, axes.last()?);
    if last - first + 1 != axes.len() {
        return None;
    }
    let p = |r: &[usize]| r.iter().product::<usize>();
    Some((p(&shape[..first]), p(&shape[first..=last]), p(&shape[last + 1..])))
}

/// Flat index of each input element's destination in the keep-dims reduction.
fn reduce_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept = keepdim_shape(shape, axes);
    let ks = strides(&kept);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(
            coord
                .iter()
                .zip(&ks)
                .enumerate()
                .map(|(d, (&c, &s))| if axes.contains(&d) { 0 } else { c * s })
                .sum(),
        );
        for d in (0..shape.len()).rev() {
            coord[d] += 1;
            if coord[d] < shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn broadcasting_is_scalar_or_exact() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let s = tape.constant(Tensor::scalar(2.0));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        let m = tape.mul(s, a).unwrap();
        assert_eq!(tape.shape(m), &[2, 3]);
        let d = tape.sub(a, s).unwrap();
        assert_eq!(tape.shape(d), &[2, 3]);
    }

    #[test]
    fn mul_by_zero_annihilates_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 3.0]));
        let y = tape.mul_scalar(x, 0.0);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_over_axis() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x, &[1], false).unwrap();
        assert_eq!(tape.value(s).shape(), &[2]);
        assert_eq!(tape.value(s).data(), &[3.0, 7.0]);
        let k = tape.sum(x, &[1], true).unwrap();
        assert_eq!(tape.value(k).shape(), &[2, 1]);
        assert!(matches!(tape.sum(x, &[2], false), Err(Error::Dimension(_))));
        let l = tape.sum_all(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mean_of_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 4], 1.75));
        let m = tape.mean_all(x);
        assert_eq!(tape.value(m).item(), 1.75);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[0.5, -1.0, 2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let l = tape.sum_all(x);
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 1], &[0.0, 3f64.ln()]));
        let y = tape.softmax_channel(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let eq = tape.constant(Tensor::full(&[1, 4, 3], 2.5));
        let y = tape.softmax_channel(eq).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let bad = tape.constant(t(&[1, 2, 1], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_channel(bad), Err(Error::Numeric(_))));
        let one = tape.constant(Tensor::zeros(&[1, 1, 3]));
        assert!(tape.softmax_channel(one).is_err());
    }

    #[test]
    fn conv_counting_and_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
        let y = tape.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 27.0);

        let data: Vec<f64> = (0..2 * 64).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[1, 2, 4, 4, 4], &data));
        let w = tape.constant(t(&[2, 2, 1, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.conv3d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn no_grad_tape_records_constants() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(!tape.requires_grad(x));
        let l = tape.sum_all(x);
        assert!(tape.backward(l).is_err());
    }

    #[test]
    fn fill_routes_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let f = tape.param(t(&[2], &[10.0, 20.0]));
        let y = tape.fill_where(x, f, vec![KEEP, 0, 1, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 10.0, 20.0, 10.0]);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tape.grad(f).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn upsample_identity_and_counts() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let x = tape.param(t(&[1, 1, 2, 2, 2], &data));
        let same = tape.upsample_nearest3d(x, 1).unwrap();
        assert_eq!(tape.value(same).data(), &data[..]);
        let up = tape.upsample_nearest3d(x, 2).unwrap();
        assert_eq!(tape.value(up).shape(), &[1, 1, 4, 4, 4]);
        let l = tape.sum_all(up);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0; 8]);
    }

    #[test]
    fn instance_norm_statistics() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 3.0));
        let g = tape.constant(Tensor::ones(&[1]));
        let s = tape.constant(Tensor::zeros(&[1]));
        let y = tape.instance_norm(c, g, s, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let data: Vec<f64> = (0..2 * 27).map(|i| ((i * 7 % 13) as f64).powi(2)).collect();
        let x = tape.constant(t(&[1, 2, 3, 3, 3], &data));
        let g = tape.constant(t(&[2], &[-2.0, 0.5]));
        let s = tape.constant(t(&[2], &[1.0, -3.0]));
        let y = tape.instance_norm(x, g, s, 1e-5).unwrap();
        let out = tape.value(y).data();
        for (ci, (gain, shift)) in [(-2.0f64, 1.0f64), (0.5, -3.0)].into_iter().enumerate() {
            let plane = &out[ci * 27..(ci + 1) * 27];
            let mean = plane.iter().sum::<f64>() / 27.0;
            let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0).sqrt();
            assert!((mean - shift).abs() < 1e-4);
            assert!((std - gain.abs()).abs() < 1e-4);
        }
    }
}
