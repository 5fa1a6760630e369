//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape in reverse and accumulates vector-Jacobian products into
//! the nodes that require gradients.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{NumericsError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial axis for finite differences over the trailing two dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    SqDiff(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Cosine { a: Var, b: Var, eps: f64 },
    SpatialDiff(Var, Axis),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, NumericsError> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// 2D convolution over `[N, C, H, W]` with a square `[O, C, k, k]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, NumericsError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [ws[0]] {
                return Err(mismatch("conv2d bias", &ws, bs));
            }
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new(&xs, &ws, stride, pad);
        let x = self.value(input);
        let w = self.value(weight);
        let mut out = vec![T::zero(); xs[0] * geom.out_len()];
        let mut col = vec![T::zero(); geom.col_len()];
        for (n, out_n) in out.chunks_mut(geom.out_len()).enumerate() {
            geom.im2col(x.outer(n), &mut col);
            T::gemm(geom.o, geom.ckk(), geom.hw_out(), w.data(), false, &col, false, T::zero(), out_n);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for out_n in out.chunks_mut(geom.out_len()) {
                for (plane, &bo) in out_n.chunks_mut(geom.hw_out()).zip(bv) {
                    plane.iter_mut().for_each(|v| *v += bo);
                }
            }
        }
        let value = Tensor::new(vec![xs[0], geom.o, geom.ho, geom.wo], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of the trailing two dimensions.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(NumericsError::InvalidShape(s));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value(x).numel() / (h * w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            let dp = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dp[i * 2 * w + j] = sp[(i / 2) * w + j / 2];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (a, b) = (T::of(scale), T::of(shift));
        self.unary(x, Op::Affine(x, scale), move |v| a * v + b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `(a - b)^2`, elementwise.
    pub fn sq_diff(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sq_diff", a, b, Op::SqDiff(a, b), |x, y| (x - y) * (x - y))
    }

    /// Concatenation along axis 1 (channels).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::InvalidShape(vec![]))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(NumericsError::InvalidShape(base));
        }
        let inner: usize = base[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(mismatch("concat", &base, s));
            }
            channels += s[1];
        }
        let n = base[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).outer(i));
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[N, ...] -> [N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    /// Per-sample cosine similarity `<a,b> / (|a||b| + eps)` over everything
    /// but the leading axis. Output shape `[N]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var, NumericsError> {
        self.same_shape("cosine_similarity", a, b)?;
        let n = self.shape(a)[0];
        let (va, vb) = (self.value(a), self.value(b));
        let e = T::of(eps);
        let out = (0..n)
            .map(|i| {
                let (x, y) = (va.outer(i), vb.outer(i));
                let (dot, na, nb) = dot_norms(x, y);
                dot / (na * nb + e)
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Cosine { a, b, eps }, rg))
    }

    /// Forward difference `x[i+1] - x[i]` along a trailing spatial axis.
    pub fn spatial_diff(&mut self, x: Var, axis: Axis) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 || (axis == Axis::Rows && s[r - 2] < 2) || (axis == Axis::Cols && s[r - 1] < 2) {
            return Err(NumericsError::InvalidShape(s));
        }
        let (h, w) = (s[r - 2], s[r - 1]);
        let (oh, ow) = match axis {
            Axis::Rows => (h - 1, w),
            Axis::Cols => (h, w - 1),
        };
        let planes = self.value(x).numel() / (h * w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let sp = &src[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                for j in 0..ow {
                    let (ni, nj) = match axis {
                        Axis::Rows => (i + 1, j),
                        Axis::Cols => (i, j + 1),
                    };
                    out.push(sp[ni * w + nj] - sp[i * w + j]);
                }
            }
        }
        let mut shape = s;
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SpatialDiff(x, axis), rg))
    }

    /// Hash of the sign pattern at every piecewise-linear node (ReLU, abs).
    ///
    /// Two evaluations with equal signatures lie on the same linear piece of
    /// every kink, so a central difference between them is valid.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                i.hash(&mut h);
                for &v in self.value(x).data() {
                    let state: u8 = if v > T::zero() {
                        2
                    } else if v < T::zero() {
                        0
                    } else {
                        1
                    };
                    state.hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, NumericsError> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(NumericsError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zip_grad(&self, g: &Tensor<T>, x: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        let data = g.data().iter().zip(xv.data()).map(|(&gi, &xi)| f(gi, xi)).collect();
        Tensor::new(g.shape().to_vec(), data).expect("gradient shape")
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NumericsError> {
        let zero = T::zero();
        match &node.op {
            Op::Leaf => {}
            &Op::Relu(x) => {
                let dx = self.zip_grad(g, x, |gi, xi| if xi > zero { gi } else { zero });
                self.accumulate(grads, x, dx);
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                let data = g.data().iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect();
                self.accumulate(grads, x, Tensor::new(g.shape().to_vec(), data)?);
            }
            &Op::Abs(x) => {
                let dx = self.zip_grad(g, x, |gi, xi| {
                    if xi > zero {
                        gi
                    } else if xi < zero {
                        -gi
                    } else {
                        zero
                    }
                });
                self.accumulate(grads, x, dx);
            }
            &Op::Square(x) => {
                let two = T::of(2.0);
                let dx = self.zip_grad(g, x, |gi, xi| two * xi * gi);
                self.accumulate(grads, x, dx);
            }
            &Op::Affine(x, scale) => {
                let s = T::of(scale);
                self.accumulate(grads, x, g.map(|v| v * s));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let da = self.zip_grad(g, b, |gi, bi| gi * bi);
                let db = self.zip_grad(g, a, |gi, ai| gi * ai);
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            &Op::SqDiff(a, b) => {
                let two = T::of(2.0);
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let da: Vec<T> = g
                    .data()
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(&gi, (&x, &y))| two * (x - y) * gi)
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                self.accumulate(grads, a, Tensor::new(g.shape().to_vec(), da)?);
                self.accumulate(grads, b, Tensor::new(g.shape().to_vec(), db)?);
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let mut offset_per_sample = 0;
                let sample_len = g.numel() / n;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let plen = self.value(p).numel() / n;
                    if self.nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(n * plen);
                        for i in 0..n {
                            let start = i * sample_len + offset_per_sample;
                            d.extend_from_slice(&g.data()[start..start + plen]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, d)?);
                    }
                    offset_per_sample += plen;
                }
            }
            &Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv));
            }
            &Op::Mean(x) => {
                let xv = self.value(x);
                let gv = g.item() / T::of(xv.numel() as f64);
                self.accumulate(grads, x, Tensor::full(xv.shape(), gv));
            }
            &Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(x))?;
                self.accumulate(grads, x, dx);
            }
            &Op::Cosine { a, b, eps } => {
                let (va, vb) = (self.value(a), self.value(b));
                let e = T::of(eps);
                let n = va.shape()[0];
                let len = va.numel() / n;
                let mut da = vec![zero; va.numel()];
                let mut db = vec![zero; vb.numel()];
                for i in 0..n {
                    let (x, y) = (va.outer(i), vb.outer(i));
                    let (dot, na, nb) = dot_norms(x, y);
                    let denom = na * nb + e;
                    let gi = g.data()[i];
                    // d/dx [dot / (|x||y| + e)] = y/D - dot * |y| * x / (|x| D^2)
                    let cx = if na > zero { dot * nb / (na * denom * denom) } else { zero };
                    let cy = if nb > zero { dot * na / (nb * denom * denom) } else { zero };
                    for j in 0..len {
                        da[i * len + j] = gi * (y[j] / denom - cx * x[j]);
                        db[i * len + j] = gi * (x[j] / denom - cy * y[j]);
                    }
                }
                self.accumulate(grads, a, Tensor::new(va.shape().to_vec(), da)?);
                self.accumulate(grads, b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            &Op::SpatialDiff(x, axis) => {
                let xs = self.shape(x).to_vec();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (g.shape()[r - 2], g.shape()[r - 1]);
                let planes = g.numel() / (oh * ow);
                let mut dx = vec![zero; planes * h * w];
                for p in 0..planes {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = gp[i * ow + j];
                            let (ni, nj) = match axis {
                                Axis::Rows => (i + 1, j),
                                Axis::Cols => (i, j + 1),
                            };
                            dp[ni * w + nj] += v;
                            dp[i * w + j] -= v;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xs, dx)?);
            }
            &Op::Upsample2x(x) => {
                let xs = self.shape(x).to_vec();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let planes = self.value(x).numel() / (h * w);
                let mut dx = vec![zero; planes * h * w];
                for p in 0..planes {
                    let gp = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dp[(i / 2) * w + j / 2] += gp[i * 2 * w + j];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xs, dx)?);
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let xs = self.shape(input).to_vec();
                let ws = self.shape(weight).to_vec();
                let geom = ConvGeom::new(&xs, &ws, stride, pad);
                let xv = self.value(input);
                let wv = self.value(weight);
                let need_x = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let mut col = vec![zero; geom.col_len()];
                let mut dw = vec![zero; wv.numel()];
                let mut dx = if need_x { vec![zero; xv.numel()] } else { Vec::new() };
                let in_len = xv.numel() / xs[0];
                for n in 0..xs[0] {
                    let gn = &g.data()[n * geom.out_len()..(n + 1) * geom.out_len()];
                    if need_w {
                        geom.im2col(xv.outer(n), &mut col);
                        T::gemm(geom.o, geom.hw_out(), geom.ckk(), gn, false, &col, true, T::one(), &mut dw);
                    }
                    if need_x {
                        T::gemm(geom.ckk(), geom.o, geom.hw_out(), wv.data(), true, gn, false, zero, &mut col);
                        geom.col2im(&col, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
                if need_w {
                    self.accumulate(grads, weight, Tensor::new(ws.clone(), dw)?);
                }
                if need_x {
                    self.accumulate(grads, input, Tensor::new(xs.clone(), dx)?);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![zero; geom.o];
                        for gn in g.data().chunks(geom.out_len()) {
                            for (o, plane) in gn.chunks(geom.hw_out()).enumerate() {
                                db[o] += plane.iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, b, Tensor::new(vec![geom.o], db)?);
                    }
                }
            }
        }
        Ok(())
    }
}

fn dot_norms<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        dot += a * b;
        xx += a * a;
        yy += b * b;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        Self {
            c,
            h,
            w,
            o,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn out_len(&self) -> usize {
        self.o * self.hw_out()
    }

    fn col_len(&self) -> usize {
        self.ckk() * self.hw_out()
    }

    /// Output positions `lo..hi` whose tap `t` lands inside `0..extent`.
    #[inline]
    fn valid(&self, t: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > t { (self.pad - t).div_ceil(s) } else { 0 };
        let hi = if extent + self.pad > t {
            ((extent - 1 + self.pad - t) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let hw = self.hw_out();
        let s = self.stride;
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.k {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let row = ((c * self.k + ky) * self.k + kx) * hw;
                    let dst = &mut col[row..row + hw];
                    dst[..ylo * self.wo].fill(T::zero());
                    dst[yhi * self.wo..].fill(T::zero());
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - self.pad;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        line[..xlo].fill(T::zero());
                        line[xhi..].fill(T::zero());
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let x0 = xlo * s + kx - self.pad;
                        if s == 1 {
                            line[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                        } else {
                            for (v, &p) in line[xlo..xhi].iter_mut().zip(src[x0..].iter().step_by(s)) {
                                *v = p;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let hw = self.hw_out();
        let s = self.stride;
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                let (ylo, yhi) = self.valid(ky, self.h, self.ho);
                for kx in 0..self.k {
                    let (xlo, xhi) = self.valid(kx, self.w, self.wo);
                    let row = ((c * self.k + ky) * self.k + kx) * hw;
                    let src = &col[row..row + hw];
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - self.pad;
                        let x0 = xlo * s + kx - self.pad;
                        let line = &src[oy * self.wo + xlo..oy * self.wo + xhi];
                        let dst = &mut plane[iy * self.w + x0..(iy + 1) * self.w];
                        for (d, &v) in dst.iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t64(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(t64(&[1, 4], &[0.3, -1.2, 2.0, 0.7]));
        let c = tape.cosine_similarity(v, v, 0.0).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn binary_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    /// Direct 7-loop convolution used as an independent reference.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((oi * c + ci) * k + ky) * k + kx;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out[((ni * o + oi) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for &(stride, h) in &[(1usize, 6usize), (2, 6), (2, 7)] {
            let x = Tensor::from_fn(&[2, 3, h, h], |i| ((i * 7) % 13) as f64 / 13.0 - 0.4);
            let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 5) % 11) as f64 / 11.0 - 0.5);
            let b = [0.1, -0.2, 0.3, 0.0];
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(t64(&[4], &b));
            let y = tape.conv2d(xv, wv, Some(bv), stride, 1).unwrap();
            let want = conv_reference(&x, &w, &b, stride, 1);
            for (a, e) in tape.value(y).data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_and_concat_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32));
        let u = tape.upsample2x(a).unwrap();
        assert_eq!(tape.shape(u), &[2, 3, 4, 4]);
        assert_eq!(tape.value(u).data()[..4], [0.0, 0.0, 1.0, 1.0]);
        let b = tape.constant(Tensor::zeros(&[2, 5, 4, 4]));
        let c = tape.concat(&[u, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 8, 4, 4]);
        let bad = tape.constant(Tensor::zeros(&[2, 5, 3, 4]));
        assert!(tape.concat(&[u, bad]).is_err());
    }

    #[test]
    fn subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[0.0, 0.0]), true);
        let r = tape.relu(x);
        let a = tape.abs(x);
        let s = tape.add(r, a).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(NumericsError::NotScalar(_))));
    }
}
