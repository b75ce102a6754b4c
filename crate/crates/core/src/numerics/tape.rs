//! Reverse-mode differentiation over matrix expressions.
//!
//! A [`Tape`] records a straight-line program of matrix ops. Leaves are either
//! constants (frozen weights, data) or parameters; gradients are only
//! propagated into nodes that depend on at least one parameter, so a frozen
//! backbone costs one extra GEMM per matmul on the backward pass instead of
//! three.

use std::borrow::Cow;

use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x m` row to every row of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    Gelu(Var),
    SoftmaxRows(Var),
}

struct Node<'w> {
    value: Cow<'w, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'w> {
    nodes: Vec<Node<'w>>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Cow<'w, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: &'w Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn param(&mut self, t: &'w Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("tape matmul shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b)).expect("tape matmul_t shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b)).expect("tape add shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(Cow::Owned(out), Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        debug_assert_eq!(r.len(), out.cols());
        for i in 0..out.rows() {
            for (x, b) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(Cow::Owned(out), Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Scale(a, s), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals).expect("tape concat_rows shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals).expect("tape concat_cols shape");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::SliceCols(a, start), ng)
    }

    /// Row-wise layer norm with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Tensor::zeros(&[r, c]);
        let mut out = Tensor::zeros(&[r, c]);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_slice_mut(i);
            for j in 0..c {
                xh[j] = (row[j] - mean) * is;
            }
            let o = out.row_slice_mut(i);
            for j in 0..c {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(Cow::Owned(out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| gelu_parts(v).0);
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(i));
        }
        let ng = self.ng(a);
        self.push(Cow::Owned(out), Op::SoftmaxRows(a), ng)
    }

    /// Back-propagates `seed` (the gradient of some scalar w.r.t. `out`).
    pub fn backward(&self, out: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut ga = Tensor::zeros(self.value(*a).shape());
                        gemm(&g, false, bv, true, &mut ga, 0.0);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut gb = Tensor::zeros(self.value(*b).shape());
                        gemm(av, true, &g, false, &mut gb, 0.0);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: ga = g b, gb = gᵀ a
                    if self.ng(*a) {
                        let mut ga = Tensor::zeros(self.value(*a).shape());
                        gemm(&g, false, self.value(*b), false, &mut ga, 0.0);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let mut gb = Tensor::zeros(self.value(*b).shape());
                        gemm(&g, true, self.value(*a), false, &mut gb, 0.0);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let c = g.cols();
                        let mut gr = vec![0.0; c];
                        for i in 0..g.rows() {
                            for (acc, v) in gr.iter_mut().zip(g.row_slice(i)) {
                                *acc += v;
                            }
                        }
                        let gr = Tensor::new(self.value(*row).shape().to_vec(), gr).unwrap();
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        if self.ng(p) {
                            let gp = g.slice_rows(start, n);
                            let gp = gp.reshape(self.value(p).shape().to_vec()).unwrap();
                            accumulate(&mut grads, p, gp);
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        if self.ng(p) {
                            accumulate(&mut grads, p, g.slice_cols(start, n));
                        }
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(&[av.rows(), av.cols()]);
                    let c = av.cols();
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga.reshape(av.shape().to_vec()).unwrap());
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(&[av.rows(), av.cols()]);
                    let w = g.cols();
                    for i in 0..g.rows() {
                        ga.row_slice_mut(i)[*start..*start + w].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (r, c) = (g.rows(), g.cols());
                    let gv = self.value(*gain).data();
                    if self.ng(*gain) || self.ng(*bias) {
                        let mut gg = vec![0.0; c];
                        let mut gb = vec![0.0; c];
                        for i in 0..r {
                            let gi = g.row_slice(i);
                            let xh = xhat.row_slice(i);
                            for j in 0..c {
                                gg[j] += gi[j] * xh[j];
                                gb[j] += gi[j];
                            }
                        }
                        if self.ng(*gain) {
                            let t = Tensor::new(self.value(*gain).shape().to_vec(), gg).unwrap();
                            accumulate(&mut grads, *gain, t);
                        }
                        if self.ng(*bias) {
                            let t = Tensor::new(self.value(*bias).shape().to_vec(), gb).unwrap();
                            accumulate(&mut grads, *bias, t);
                        }
                    }
                    if self.ng(*x) {
                        let mut gx = Tensor::zeros(&[r, c]);
                        let cf = c as f64;
                        for i in 0..r {
                            let gi = g.row_slice(i);
                            let xh = xhat.row_slice(i);
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..c {
                                let d = gi[j] * gv[j];
                                sum_d += d;
                                sum_dx += d * xh[j];
                            }
                            let out = gx.row_slice_mut(i);
                            for j in 0..c {
                                let d = gi[j] * gv[j];
                                out[j] = inv_std[i] * (d - sum_d / cf - xh[j] * sum_dx / cf);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let mut ga = g;
                    for (gd, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                        *gd *= gelu_parts(x).1;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(&[g.rows(), g.cols()]);
                    for i in 0..g.rows() {
                        let yi = y.row_slice(i);
                        let gi = g.row_slice(i);
                        let s: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for (o, (yv, gv)) in ga.row_slice_mut(i).iter_mut().zip(yi.iter().zip(gi)) {
                            *o = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return;
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
