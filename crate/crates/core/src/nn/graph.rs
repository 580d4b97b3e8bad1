//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled from a borrowed [`ParamSet`]; [`Graph::backward`] returns the
//! gradient of a scalar node with respect to every parameter that was used.

use std::collections::HashMap;

use super::params::{ParamId, ParamSet};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    RepeatRows(Var, usize),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Upsample2x(Var),
}

/// Geometry of a square-kernel 2D convolution on a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// `[C*k*k, Ho*Wo]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let npix = oh * ow;
        let mut cols = vec![0.0; self.col_rows() * npix];
        for c in 0..self.in_ch {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let npix = oh * ow;
        let mut x = vec![0.0; self.in_ch * self.h * self.w];
        for c in 0..self.in_ch {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by parameter id.
pub struct Gradients {
    pub params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a * b^T` with `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(k, bv.cols(), "matmul_nt inner dims {:?} x {:?}^T", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), true, 0.0, &mut out);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNt(a, b), ng)
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.row_len();
        assert_eq!(bv.len(), n, "bias length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddBias(x, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(&[a]);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(&[a]);
        self.push(out, Op::Square(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let ng = self.ng(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    /// Concatenates along the leading axis. Trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat_rows trailing dims");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(parts);
        self.push(Tensor::new(shape, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            assert_eq!(v.rows(), m, "concat_cols row count");
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.ng(parts);
        self.push(Tensor::new(vec![m, n], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        assert!(start < end && end <= v.rows());
        let w = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, v.data()[start * w..end * w].to_vec());
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        assert!(start < end && end <= n);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&v.data()[i * n + start..i * n + end]);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![m, w], data), Op::SliceCols(a, start, end), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Tiles a single row (any shape with `n` elements) into `[rows, n]`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let v = self.value(a);
        let n = v.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::new(vec![rows, n], data), Op::RepeatRows(a, rows), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.row_len();
        let mut out = v.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalization followed by `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.row_len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let (mean, inv) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g.data()[j] + b.data()[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    /// 2D convolution of a `[C, H, W]` input with weights `[Co, C*k*k]`
    /// and bias `[Co]`, producing `[Co, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "conv2d expects [C, H, W]");
        let wv = self.value(w);
        let geom = ConvGeom { in_ch: s[0], out_ch: wv.rows(), kernel, stride, pad, h: s[1], w: s[2] };
        assert_eq!(wv.row_len(), geom.col_rows(), "conv2d weight shape");
        let cols = geom.im2col(xv.data());
        let npix = geom.out_h() * geom.out_w();
        let mut out = vec![0.0; geom.out_ch * npix];
        let bias = self.value(b).data();
        for (o, row) in out.chunks_exact_mut(npix).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(geom.out_ch, geom.col_rows(), npix, 1.0, wv.data(), false, &cols, false, 1.0, &mut out);
        let ng = self.ng(&[x, w, b]);
        let t = Tensor::new(vec![geom.out_ch, geom.out_h(), geom.out_w()], out);
        self.push(t, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Nearest-neighbor 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = v.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(x), ng)
    }

    /// Gradient of scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        let mut out = Gradients { params: vec![None; self.params.len()] };

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut acc = |v: Var, t: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out.params[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut da);
                        acc(*a, Tensor::new(vec![m, k], da));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut db);
                        acc(*b, Tensor::new(vec![k, n], db));
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, g.data(), false, bv.data(), false, 0.0, &mut da);
                        acc(*a, Tensor::new(vec![m, k], da));
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, 1.0, g.data(), true, av.data(), false, 0.0, &mut db);
                        acc(*b, Tensor::new(vec![n, k], db));
                    }
                }
                Op::AddBias(x, b) => {
                    let bl = self.value(*b).len();
                    let mut db = vec![0.0; bl];
                    for row in g.data().chunks_exact(bl) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db));
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |d, y| d * y));
                    acc(*b, g.zip_map(self.value(*a), |d, x| d * x));
                }
                Op::Scale(a, s) => acc(*a, g.map(|d| d * s)),
                Op::Sigmoid(a) => acc(*a, g.zip_map(val, |d, y| d * y * (1.0 - y))),
                Op::Tanh(a) => acc(*a, g.zip_map(val, |d, y| d * (1.0 - y * y))),
                Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    acc(*a, g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { s * d }))
                }
                Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |d, x| 2.0 * x * d)),
                Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |d, x| d * sign(x))),
                Op::Sum(a) => {
                    let d = g.item();
                    acc(*a, Tensor::full(self.value(*a).shape(), d));
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    acc(*a, Tensor::full(av.shape(), g.item() / av.len() as f64));
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        acc(*p, Tensor::new(pv.shape().to_vec(), g.data()[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                        }
                        acc(*p, Tensor::new(vec![m, w], d));
                        off += w;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let w = av.row_len();
                    let mut d = Tensor::zeros(av.shape());
                    d.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                    acc(*a, d);
                }
                Op::SliceCols(a, start, end) => {
                    let av = self.value(*a);
                    let (m, n) = (av.rows(), av.cols());
                    let w = end - start;
                    let mut d = Tensor::zeros(av.shape());
                    for i in 0..m {
                        d.data_mut()[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(*a, g.reshaped(&shape));
                }
                Op::RepeatRows(a, rows) => {
                    let av = self.value(*a);
                    let n = av.len();
                    let mut d = vec![0.0; n];
                    for r in 0..*rows {
                        for (dd, v) in d.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *dd += v;
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), d));
                }
                Op::SoftmaxRows(a) => {
                    let n = val.row_len();
                    let mut d = g.clone();
                    for (drow, yrow) in d.data_mut().chunks_exact_mut(n).zip(val.data().chunks_exact(n)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (dv, y) in drow.iter_mut().zip(yrow) {
                            *dv = y * (*dv - dot);
                        }
                    }
                    acc(*a, d);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = self.value(*x);
                    let gam = self.value(*gamma).data();
                    let n = xv.row_len();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dgam = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for (r, (xrow, grow)) in xv.data().chunks_exact(n).zip(g.data().chunks_exact(n)).enumerate() {
                        let (mean, inv) = row_stats(xrow, *eps);
                        let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(d, gm)| d * gm).collect();
                        for j in 0..n {
                            dgam[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx));
                    acc(*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), dgam));
                    acc(*beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta));
                }
                Op::Conv2d { x, w, b, geom } => {
                    let npix = geom.out_h() * geom.out_w();
                    let rows = geom.col_rows();
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<f64> = g.data().chunks_exact(npix).map(|r| r.iter().sum()).collect();
                        acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db));
                    }
                    let need_w = self.nodes[w.0].needs_grad;
                    let need_x = self.nodes[x.0].needs_grad;
                    if need_w {
                        let cols = geom.im2col(self.value(*x).data());
                        let mut dw = vec![0.0; geom.out_ch * rows];
                        gemm(geom.out_ch, npix, rows, 1.0, g.data(), false, &cols, true, 0.0, &mut dw);
                        acc(*w, Tensor::new(self.value(*w).shape().to_vec(), dw));
                    }
                    if need_x {
                        let mut dcols = vec![0.0; rows * npix];
                        gemm(rows, geom.out_ch, npix, 1.0, self.value(*w).data(), true, g.data(), false, 0.0, &mut dcols);
                        acc(*x, Tensor::new(self.value(*x).shape().to_vec(), geom.col2im(&dcols)));
                    }
                }
                Op::Upsample2x(a) => {
                    let av = self.value(*a);
                    let (c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), d));
                }
            }
        }
        out
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(params) for a graph builder.
    fn check(ps: &ParamSet, build: impl Fn(&mut Graph) -> Var) {
        let g0 = {
            let mut g = Graph::new(ps);
            let l = build(&mut g);
            g.backward(l)
        };
        let h = 1e-6;
        for (id, name, t) in ps.iter() {
            for k in 0..t.len() {
                let mut plus = ps.clone();
                plus.get_mut(id).data_mut()[k] += h;
                let mut minus = ps.clone();
                minus.get_mut(id).data_mut()[k] -= h;
                let f = |p: &ParamSet| {
                    let mut g = Graph::new(p);
                    let l = build(&mut g);
                    g.value(l).item()
                };
                let num = (f(&plus) - f(&minus)) / (2.0 * h);
                let ana = g0.get(id).map_or(0.0, |g| g.data()[k]);
                let err = (num - ana).abs() / (num.abs().max(ana.abs()).max(1e-3));
                assert!(err < 1e-5, "{name}[{k}]: analytic {ana} numeric {num}");
            }
        }
    }

    fn rand_param(ps: &mut ParamSet, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
        let n = shape.iter().product();
        ps.add(name, Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()))
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let a = rand_param(&mut ps, "a", &[3, 4], &mut rng);
        let b = rand_param(&mut ps, "b", &[4, 5], &mut rng);
        let c = rand_param(&mut ps, "c", &[5], &mut rng);
        let d = rand_param(&mut ps, "d", &[2, 5], &mut rng);
        let gam = rand_param(&mut ps, "gam", &[5], &mut rng);
        let bet = rand_param(&mut ps, "bet", &[5], &mut rng);
        check(&ps, |g| {
            let (a, b, c, d) = (g.param(a), g.param(b), g.param(c), g.param(d));
            let (gam, bet) = (g.param(gam), g.param(bet));
            let x = g.matmul(a, b);
            let x = g.add_bias(x, c);
            let s = g.sigmoid(x);
            let t = g.tanh(x);
            let y = g.mul(s, t);
            let y = g.layer_norm(y, gam, bet, 1e-5);
            let sm = g.softmax_rows(y);
            let nt = g.matmul_nt(sm, d);
            let r = g.repeat_rows(c, 3);
            let cat = g.concat_cols(&[nt, r]);
            let top = g.slice_rows(cat, 1, 3);
            let mid = g.slice_cols(top, 1, 6);
            let lr = g.leaky_relu(mid, 0.2);
            let sq = g.square(lr);
            let rows = g.concat_rows(&[sq, lr]);
            let rs = g.reshape(rows, &[20]);
            let sc = g.scale(rs, 0.7);
            let ab = g.abs(sc);
            let m = g.mean(ab);
            let s2 = g.sum(sq);
            let tot = g.add(m, s2);
            g.sub(tot, m)
        });
    }

    #[test]
    fn conv_and_upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let x = rand_param(&mut ps, "x", &[2, 5, 6], &mut rng);
        let w = rand_param(&mut ps, "w", &[3, 2 * 9], &mut rng);
        let b = rand_param(&mut ps, "b", &[3], &mut rng);
        let w2 = rand_param(&mut ps, "w2", &[2, 3 * 9], &mut rng);
        let b2 = rand_param(&mut ps, "b2", &[2], &mut rng);
        check(&ps, |g| {
            let (x, w, b, w2, b2) = (g.param(x), g.param(w), g.param(b), g.param(w2), g.param(b2));
            let y = g.conv2d(x, w, b, 3, 2, 1);
            let u = g.upsample2x(y);
            let z = g.conv2d(u, w2, b2, 3, 1, 1);
            let z = g.tanh(z);
            let sq = g.square(z);
            g.sum(sq)
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, co) = (2, 5, 4, 3);
        let xs: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..co * c * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bs: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let xv = g.constant(Tensor::new(vec![c, h, w], xs.clone()));
        let wv = g.constant(Tensor::new(vec![co, c * 9], ws.clone()));
        let bv = g.constant(Tensor::new(vec![co], bs.clone()));
        for stride in [1, 2] {
            let y = g.conv2d(xv, wv, bv, 3, stride, 1);
            let out = g.value(y).clone();
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bs[o];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        s += ws[o * c * 9 + ci * 9 + ky * 3 + kx]
                                            * xs[ci * h * w + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((out.data()[(o * oh + oy) * ow + ox] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut ps = ParamSet::new();
        let p = ps.add("p", Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let mut g = Graph::new(&ps);
        let c = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]));
        let pv = g.param(p);
        let y = g.matmul(pv, c);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(p).unwrap().data(), &[3.0, 4.0]);
    }
}
