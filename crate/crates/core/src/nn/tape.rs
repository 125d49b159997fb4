//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the tape is
//! topologically ordered by construction and `backward` is a single reverse sweep.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var, Conv2dOpts),
    Upsample(Var, usize, usize),
    Broadcast2d(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not contribute to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, node, needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, node: Op) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(&[a]);
        self.push(value, node, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |p, q| p / q, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        self.unary(a, |x| x * k, Op::Scale(a, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, |x| x.max(l).min(h), Op::Clamp(a, lo, hi))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::Matmul(a, b), needs))
    }

    /// Adds `b[c]` along axis 1 of `x` (features of `[B, C]`, channels of `[B, C, ...]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let c = sx[1];
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v + bias[(i / inner) % c];
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(Tensor::new(sx, out)?, Op::AddBias(x, b), needs))
    }

    /// `x @ w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, opts: Conv2dOpts) -> Result<Var> {
        let geo = ConvGeom::new(self.shape(x), self.shape(w), opts)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); geo.b * geo.o * geo.out_hw()];
        let mut col = vec![T::zero(); geo.col_rows() * geo.out_hw()];
        for bi in 0..geo.b {
            geo.im2col(&xv[bi * geo.in_len()..(bi + 1) * geo.in_len()], &mut col);
            let dst = &mut out[bi * geo.o * geo.out_hw()..(bi + 1) * geo.o * geo.out_hw()];
            T::gemm(
                geo.o,
                geo.col_rows(),
                geo.out_hw(),
                wv,
                geo.col_rows() as isize,
                1,
                &col,
                geo.out_hw() as isize,
                1,
                T::zero(),
                dst,
                geo.out_hw() as isize,
                1,
            );
        }
        let needs = self.needs(&[x, w]);
        let value = Tensor::new([geo.b, geo.o, geo.ho, geo.wo], out)?;
        Ok(self.push(value, Op::Conv2d(x, w, opts), needs))
    }

    /// Nearest-neighbour upsampling of `[B, C, H, W]` by integer factors.
    pub fn upsample(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || fh == 0 || fw == 0 {
            return Err(Error::shape("upsample", format!("{s:?} by ({fh}, {fw})")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h * fh, w * fw);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = src[(p * h + i / fh) * w + j / fw];
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new([s[0], s[1], oh, ow], out)?, Op::Upsample(x, fh, fw), needs))
    }

    /// Repeats `[B, C]` over an `h x w` grid, giving `[B, C, h, w]`.
    pub fn broadcast2d(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || h == 0 || w == 0 {
            return Err(Error::shape("broadcast2d", format!("{s:?} to {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * h * w);
        for &v in src {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new([s[0], s[1], h, w], out)?, Op::Broadcast2d(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec()).map_err(|_| {
            Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x)))
        })?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.needs(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), needs))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice(x, axis, start), needs))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(T::of(total)), Op::Sum(x), needs)
    }

    /// Mean of all elements, accumulated in `f64`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let total: f64 = v.data().iter().map(|v| v.f64()).sum();
        let mean = total / v.numel() as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(T::of(mean)), Op::Mean(x), needs)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let zip_map = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            let data = g.data().iter().zip(a.data()).map(|(&gg, &x)| f(gg, x)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(bv, &|gg, y| gg * y));
                self.accumulate(grads, *b, zip_map(av, &|gg, x| gg * x));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.accumulate(grads, *a, zip_map(bv, &|gg, y| gg / y));
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(bv.data())
                    .map(|((&gg, &q), &y)| -gg * q / y)
                    .collect();
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), data)?);
            }
            Op::Scale(a, c) => {
                let k = T::of(*c);
                self.accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape)?);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(out, &|gg, y| gg * (T::one() - y * y))),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, zip_map(out, &|gg, y| gg * y * (T::one() - y)))
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    zip_map(av, &|gg, x| {
                        let s = sigmoid(x);
                        gg * s * (T::one() + x * (T::one() - s))
                    }),
                );
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(out, &|gg, y| gg * y)),
            Op::Log(a) => self.accumulate(grads, *a, zip_map(self.value(*a), &|gg, x| gg / x)),
            Op::Abs(a) => self.accumulate(
                grads,
                *a,
                zip_map(self.value(*a), &|gg, x| {
                    if x > T::zero() {
                        gg
                    } else if x < T::zero() {
                        -gg
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(a) => {
                let two = T::of(2.0);
                self.accumulate(grads, *a, zip_map(self.value(*a), &|gg, x| two * gg * x))
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                self.accumulate(
                    grads,
                    *a,
                    zip_map(self.value(*a), &|gg, x| if x < l || x > h { T::zero() } else { gg }),
                );
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    // g [m, n] x b^T [n, k]
                    T::gemm(m, n, k, g.data(), n as isize, 1, bv.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    self.accumulate(grads, *a, Tensor::new([m, k], da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    // a^T [k, m] x g [m, n]
                    T::gemm(k, m, n, av.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    self.accumulate(grads, *b, Tensor::new([k, n], db)?);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let s = g.shape();
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                let mut acc = vec![0f64; c];
                for (idx, v) in g.data().iter().enumerate() {
                    acc[(idx / inner) % c] += v.f64();
                }
                self.accumulate(grads, *b, Tensor::new([c], acc.into_iter().map(T::of).collect())?);
            }
            Op::Conv2d(x, w, opts) => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w), *opts)?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (rows, hw) = (geo.col_rows(), geo.out_hw());
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                let mut dw = vec![T::zero(); geo.o * rows];
                let mut dx = vec![T::zero(); if want_x { xv.len() } else { 0 }];
                let mut col = vec![T::zero(); rows * hw];
                let mut dcol = vec![T::zero(); rows * hw];
                for bi in 0..geo.b {
                    let gb = &g.data()[bi * geo.o * hw..(bi + 1) * geo.o * hw];
                    if want_w {
                        geo.im2col(&xv[bi * geo.in_len()..(bi + 1) * geo.in_len()], &mut col);
                        // dW += g_b [o, hw] x col^T [hw, rows]
                        T::gemm(geo.o, hw, rows, gb, hw as isize, 1, &col, 1, hw as isize, T::one(), &mut dw, rows as isize, 1);
                    }
                    if want_x {
                        // dcol = W^T [rows, o] x g_b [o, hw]
                        T::gemm(rows, geo.o, hw, wv, 1, rows as isize, gb, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                        geo.col2im(&dcol, &mut dx[bi * geo.in_len()..(bi + 1) * geo.in_len()]);
                    }
                }
                if want_w {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
            }
            Op::Upsample(x, fh, fw) => {
                let s = self.shape(*x).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h * fh, w * fw);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = &mut dx[(p * h + i / fh) * w + j / fw];
                            *d = *d + g.data()[(p * oh + i) * ow + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Broadcast2d(x) => {
                let s = self.shape(*x).to_vec();
                let plane = g.numel() / (s[0] * s[1]);
                let dx = g
                    .data()
                    .chunks(plane)
                    .map(|c| T::of(c.iter().map(|v| v.f64()).sum()))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Concat(parts, axis) => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let row = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * row + offset..o * row + offset + len]);
                    }
                    offset += len;
                    self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                }
            }
            Op::Slice(x, axis, start) => {
                let s = self.shape(*x).to_vec();
                let len = out.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![T::zero(); s.iter().product()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let gv = T::of(g.data()[0].f64() / n);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
        }
        Ok(())
    }
}

/// Gradient of a scalar `loss` with respect to each of `params`, shape-matched;
/// parameters that do not influence the loss receive zeros.
pub fn grad_eval<T: Scalar>(tape: &Tape<T>, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
    let mut g = tape.backward(loss)?;
    Ok(params.iter().map(|&p| g.take(p)).collect())
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOpts,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], opts: Conv2dOpts) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || opts.stride.0 == 0 || opts.stride.1 == 0 {
            return Err(Error::shape("conv2d", format!("input {x:?}, weight {w:?}, {opts:?}")));
        }
        let (h, wd) = (x[2] + 2 * opts.pad.0, x[3] + 2 * opts.pad.1);
        if w[2] > h || w[3] > wd {
            return Err(Error::shape("conv2d", format!("kernel {w:?} larger than padded input {x:?}")));
        }
        Ok(Self {
            b: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            ho: (h - w[2]) / opts.stride.0 + 1,
            wo: (wd - w[3]) / opts.stride.1 + 1,
            opts,
        })
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source pixel for output `(oi, oj)` and kernel tap `(ki, kj)`, if inside the image.
    #[inline]
    fn src(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<usize> {
        let i = (oi * self.opts.stride.0 + ki).checked_sub(self.opts.pad.0)?;
        let j = (oj * self.opts.stride.1 + kj).checked_sub(self.opts.pad.1)?;
        (i < self.h && j < self.w).then_some(i * self.w + j)
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let hw = self.out_hw();
        for ch in 0..self.c {
            let plane = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ch * self.kh + ki) * self.kw + kj) * hw;
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            col[row + oi * self.wo + oj] = match self.src(oi, oj, ki, kj) {
                                Some(s) => plane[s],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let hw = self.out_hw();
        for ch in 0..self.c {
            let plane = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ch * self.kh + ki) * self.kw + kj) * hw;
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            if let Some(s) = self.src(oi, oj, ki, kj) {
                                plane[s] = plane[s] + col[row + oi * self.wo + oj];
                            }
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

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn derivative_of_square_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let g = grad_eval(&tape, y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[1], &[5.0]));
        let y = tape.scale(c, 3.0);
        let g = grad_eval(&tape, y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 4, 5], |i| (i as f64 * 0.37).sin()));
        let w = tape.constant(Tensor::from_fn([3, 2, 3, 2], |i| (i as f64 * 0.11).cos()));
        let opts = Conv2dOpts { stride: (2, 1), pad: (1, 0) };
        let y = tape.conv2d(x, w, opts).unwrap();
        let (xv, wv, yv) = (tape.value(x).data(), tape.value(w).data(), tape.value(y));
        assert_eq!(yv.shape(), &[1, 3, 2, 4]);
        for o in 0..3 {
            for oi in 0..2 {
                for oj in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..2 {
                                let i = (oi * 2 + ki) as isize - 1;
                                let j = oj + kj;
                                if i < 0 || i >= 4 {
                                    continue;
                                }
                                acc += xv[(c * 4 + i as usize) * 5 + j] * wv[((o * 2 + c) * 3 + ki) * 2 + kj];
                            }
                        }
                    }
                    let got = yv.data()[(o * 2 + oi) * 4 + oj];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let b = tape.param(Tensor::from_fn([2, 1, 2], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 4, 2]);
        let back = tape.slice(c, 1, 3, 1).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let front = tape.slice(c, 1, 0, 3).unwrap();
        assert_eq!(tape.value(front), tape.value(a));
    }
}
