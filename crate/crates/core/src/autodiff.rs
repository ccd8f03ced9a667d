//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. Nodes are created
//! in dependency order, so walking the tape from the end is a reverse
//! topological traversal. Gradients of values consumed by several operations
//! are summed.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm, split_at_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    /// `a[.., k] · b[k, n]`
    MatMul(Var, Var),
    /// `a[Ba, m, k] · b[Bb, k, n]` with `Ba`, `Bb` either 1 or the batch size.
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Activation(Var, Activation),
    Abs(Var),
    RowSoftmax(Var),
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        dilation: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::Numeric {
            op: "row_softmax",
            detail: "non-finite input".into(),
        });
    }
    let n = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    let mut sorted = Vec::with_capacity(n);
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = (*v - max).exp();
        }
        // summing in sorted order keeps the result independent of column order
        sorted.clear();
        sorted.extend_from_slice(row);
        sorted.sort_unstable_by(f64::total_cmp);
        let total: f64 = sorted.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

/// Unfolds `x[R, T, C]` into `[R·T', P·C]` rows where column block `p` holds the
/// input `d·p` steps before the aligned position.
fn im2col(
    x: &[f64],
    r: usize,
    t: usize,
    c: usize,
    taps: usize,
    dilation: usize,
) -> (Vec<f64>, usize) {
    let t_out = t - dilation * (taps - 1);
    let width = taps * c;
    let mut col = vec![0.0; r * t_out * width];
    for ri in 0..r {
        for ti in 0..t_out {
            let row = &mut col[(ri * t_out + ti) * width..(ri * t_out + ti + 1) * width];
            for p in 0..taps {
                let src_t = ti + dilation * (taps - 1 - p);
                let src = &x[(ri * t + src_t) * c..(ri * t + src_t + 1) * c];
                row[p * c..(p + 1) * c].copy_from_slice(src);
            }
        }
    }
    (col, t_out)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records the current value of a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value().clone(), Op::Param(id))
    }

    /// Strict 2-D product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        self.linear(a, b)
    }

    /// Applies `w[k, n]` to the last axis of `x[.., k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::dim("linear", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::MatMul(x, w)))
    }

    /// Batched product of rank-3 operands; a batch extent of 1 broadcasts.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[1] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let batch = sa[0].max(sb[0]);
        if (sa[0] != 1 && sa[0] != batch) || (sb[0] != 1 && sb[0] != batch) {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let (m, k, n) = (sa[1], sa[2], sb[2]);
        let (step_a, step_b) = (
            if sa[0] == 1 { 0 } else { m * k },
            if sb[0] == 1 { 0 } else { k * n },
        );
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for (i, chunk) in out.chunks_mut(m * n).enumerate() {
            gemm(
                m,
                k,
                n,
                &da[i * step_a..i * step_a + m * k],
                false,
                &db[i * step_b..i * step_b + k * n],
                false,
                chunk,
                false,
            );
        }
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![batch, m, n], out),
            Op::BatchMatMul(a, b),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| Error::dim("add", self.shape(a), self.shape(b)))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .map_err(|_| Error::dim("sub", self.shape(a), self.shape(b)))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Adds `bias[n]` along the last axis of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || *sx.last().unwrap() != sb[0] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(b.len()) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| Error::dim("hadamard", self.shape(a), self.shape(b)))?;
        Ok(self.push(out, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        let out = self.value(x).map(f);
        self.push(out, Op::Activation(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::RowSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        Ok(self.push(out, Op::Permute(x, axes.to_vec())))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_axis(axis, start, len)?;
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    /// Dilated causal convolution of `x[.., T, C]` with `kernel[P, C, D]`.
    ///
    /// Output position `t` is aligned with input position `t + d·(P−1)`; tap `p`
    /// reads the input `d·p` steps before it. Only positions with a full
    /// window are produced, so `T' = T − d·(P−1)`.
    pub fn dilated_causal_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() < 2 || sk.len() != 3 || sk[1] != sx[sx.len() - 1] {
            return Err(Error::dim("dilated_causal_conv1d", &sx, &sk));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        let (taps, c, d_out) = (sk[0], sk[1], sk[2]);
        let t = sx[sx.len() - 2];
        let required = dilation * (taps - 1) + 1;
        if t < required {
            return Err(Error::Length {
                op: "dilated_causal_conv1d",
                got: t,
                required,
            });
        }
        let r: usize = sx[..sx.len() - 2].iter().product();
        let (col, t_out) = im2col(self.value(x).data(), r, t, c, taps, dilation);
        let mut out = vec![0.0; r * t_out * d_out];
        gemm(
            r * t_out,
            taps * c,
            d_out,
            &col,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sx.clone();
        let n = shape.len();
        shape[n - 2] = t_out;
        shape[n - 1] = d_out;
        Ok(self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::Conv1d {
                x,
                kernel,
                dilation,
            },
        ))
    }

    /// Propagates `∂loss/∂·` back through the tape and accumulates parameter
    /// gradients into `store`. Returns the nodes in the order they were visited.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Vec<Var>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Shape {
                shape: lv.shape().to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts_unchecked(lv.shape().to_vec(), vec![1.0]));
        let mut visited = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(Var(i));
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => store.get_mut(*id).accumulate_grad(&g),
                Op::MatMul(a, w) => {
                    let (av, wv) = (self.value(*a), self.value(*w));
                    let (k, n) = (wv.shape()[0], wv.shape()[1]);
                    let rows = av.numel() / k;
                    let mut ga = vec![0.0; rows * k];
                    gemm(rows, n, k, g.data(), false, wv.data(), true, &mut ga, false);
                    let mut gw = vec![0.0; k * n];
                    gemm(k, rows, n, av.data(), true, g.data(), false, &mut gw, false);
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::from_parts_unchecked(av.shape().to_vec(), ga),
                    );
                    accumulate(
                        &mut grads,
                        *w,
                        Tensor::from_parts_unchecked(wv.shape().to_vec(), gw),
                    );
                }
                Op::BatchMatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ba, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let (bb, n) = (bv.shape()[0], bv.shape()[2]);
                    let batch = ba.max(bb);
                    let mut ga = vec![0.0; av.numel()];
                    let mut gb = vec![0.0; bv.numel()];
                    for i in 0..batch {
                        let (oa, ob) = (
                            if ba == 1 { 0 } else { i * m * k },
                            if bb == 1 { 0 } else { i * k * n },
                        );
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            &bv.data()[ob..ob + k * n],
                            true,
                            &mut ga[oa..oa + m * k],
                            true,
                        );
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[oa..oa + m * k],
                            true,
                            gi,
                            false,
                            &mut gb[ob..ob + k * n],
                            true,
                        );
                    }
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::from_parts_unchecked(av.shape().to_vec(), ga),
                    );
                    accumulate(
                        &mut grads,
                        *b,
                        Tensor::from_parts_unchecked(bv.shape().to_vec(), gb),
                    );
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBias(x, bias) => {
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::from_parts_unchecked(vec![n], gb));
                    accumulate(&mut grads, *x, g);
                }
                Op::Hadamard(a, b) => {
                    let ga = g.zip_map(self.value(*b), |u, v| u * v)?;
                    let gb = g.zip_map(self.value(*a), |u, v| u * v)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(x, f) => accumulate(&mut grads, *x, g.map(|v| v * f)),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Activation(x, kind) => {
                    let gx = match kind {
                        Activation::Relu => {
                            g.zip_map(self.value(*x), |u, v| if v > 0.0 { u } else { 0.0 })?
                        }
                        Activation::Tanh => g.zip_map(&node.value, |u, y| u * (1.0 - y * y))?,
                        Activation::Sigmoid => g.zip_map(&node.value, |u, y| u * y * (1.0 - y))?,
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::Abs(x) => {
                    let gx = g.zip_map(self.value(*x), |u, v| {
                        if v > 0.0 {
                            u
                        } else if v < 0.0 {
                            -u
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowSoftmax(x) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut gx = vec![0.0; y.numel()];
                    for ((gr, yr), out) in g
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_parts_unchecked(y.shape().to_vec(), gx),
                    );
                }
                Op::Sum(x) => {
                    let gs = g.item();
                    accumulate(&mut grads, *x, self.value(*x).map(|_| gs));
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Permute(x, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    accumulate(&mut grads, *x, g.permute(&inverse)?);
                }
                Op::Slice { x, axis, start } => {
                    let xs = self.shape(*x);
                    let (outer, extent, inner) = split_at_axis(xs, *axis);
                    let len = g.shape()[*axis];
                    let mut gx = vec![0.0; xs.iter().product()];
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        gx[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_parts_unchecked(xs.to_vec(), gx),
                    );
                }
                Op::Conv1d {
                    x,
                    kernel,
                    dilation,
                } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernel));
                    let xs = xv.shape();
                    let (taps, c, d_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                    let t = xs[xs.len() - 2];
                    let r: usize = xs[..xs.len() - 2].iter().product();
                    let (col, t_out) = im2col(xv.data(), r, t, c, taps, *dilation);
                    let width = taps * c;
                    let mut gk = vec![0.0; width * d_out];
                    gemm(
                        width,
                        r * t_out,
                        d_out,
                        &col,
                        true,
                        g.data(),
                        false,
                        &mut gk,
                        false,
                    );
                    let mut gcol = vec![0.0; r * t_out * width];
                    gemm(
                        r * t_out,
                        d_out,
                        width,
                        g.data(),
                        false,
                        kv.data(),
                        true,
                        &mut gcol,
                        false,
                    );
                    let mut gx = vec![0.0; xv.numel()];
                    for ri in 0..r {
                        for ti in 0..t_out {
                            let row =
                                &gcol[(ri * t_out + ti) * width..(ri * t_out + ti + 1) * width];
                            for p in 0..taps {
                                let src_t = ti + dilation * (taps - 1 - p);
                                let dst = &mut gx[(ri * t + src_t) * c..(ri * t + src_t + 1) * c];
                                for (a, b) in dst.iter_mut().zip(&row[p * c..(p + 1) * c]) {
                                    *a += b;
                                }
                            }
                        }
                    }
                    accumulate(
                        &mut grads,
                        *kernel,
                        Tensor::from_parts_unchecked(kv.shape().to_vec(), gk),
                    );
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_parts_unchecked(xs.to_vec(), gx),
                    );
                }
            }
        }
        Ok(visited)
    }
}

/// Row-wise softmax of a plain tensor (last axis).
pub fn row_softmax(x: &Tensor) -> Result<Tensor> {
    softmax_rows(x)
}
