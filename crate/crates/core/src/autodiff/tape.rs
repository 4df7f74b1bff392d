use std::sync::Arc;

use super::{Real, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear combination of rows: `out[o] += w * in[i]` for each entry.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMix {
    pub out_rows: usize,
    pub in_rows: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl RowMix {
    pub fn new(out_rows: usize, in_rows: usize) -> Self {
        Self {
            out_rows,
            in_rows,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, out_row: usize, in_row: usize, weight: f64) {
        debug_assert!(out_row < self.out_rows && in_row < self.in_rows);
        self.entries.push((out_row, in_row, weight));
    }

    /// Average consecutive groups of `group` rows.
    pub fn group_mean(groups: usize, group: usize) -> Self {
        let mut mix = Self::new(groups, groups * group);
        let w = 1.0 / group as f64;
        for g in 0..groups {
            for k in 0..group {
                mix.push(g, g * group + k, w);
            }
        }
        mix
    }

    /// Sum consecutive groups of `group` rows.
    pub fn group_sum(groups: usize, group: usize) -> Self {
        let mut mix = Self::group_mean(groups, group);
        mix.entries.iter_mut().for_each(|e| e.2 = 1.0);
        mix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Rows are (batch, out_y, out_x); columns are (channel, ky, kx).
    fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let patch = self.patch();
        let mut cols = vec![T::zero(); self.batch * self.positions() * patch];
        let plane = self.h * self.w;
        let mut row = 0;
        for b in 0..self.batch {
            let img = &input[b * self.c_in * plane..(b + 1) * self.c_in * plane];
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    let mut q = 0;
                    for c in 0..self.c_in {
                        for ky in 0..self.k {
                            let y = oy * self.stride + ky;
                            let base = c * plane + y * self.w + ox * self.stride;
                            dst[q..q + self.k].copy_from_slice(&img[base..base + self.k]);
                            q += self.k;
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im_add<T: Real>(&self, cols: &[T], grad_in: &mut [T]) {
        let patch = self.patch();
        let plane = self.h * self.w;
        let mut row = 0;
        for b in 0..self.batch {
            let img = &mut grad_in[b * self.c_in * plane..(b + 1) * self.c_in * plane];
            for oy in 0..self.h_out {
                for ox in 0..self.w_out {
                    let src = &cols[row * patch..(row + 1) * patch];
                    let mut q = 0;
                    for c in 0..self.c_in {
                        for ky in 0..self.k {
                            let y = oy * self.stride + ky;
                            let base = c * plane + y * self.w + ox * self.stride;
                            for kx in 0..self.k {
                                img[base + kx] += src[q + kx];
                            }
                            q += self.k;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
        len: usize,
    },
    RowMix {
        src: Var,
        mix: Arc<RowMix>,
    },
    Pick {
        src: Var,
        index: Arc<Vec<usize>>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Reshape(Var),
    Detach,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Work counters from the last backward sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackwardStats {
    pub nodes_recorded: usize,
    pub nodes_visited: usize,
}

/// Reverse-mode recording of tensor operations.
///
/// Values are computed eagerly when an op is recorded. Leaf gradients
/// accumulate across [`Tape::backward`] calls until [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    last_stats: BackwardStats,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            last_stats: BackwardStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn last_backward_stats(&self) -> BackwardStats {
        self.last_stats
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Add a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (rows, cols) = xv.matrix_dims();
        if bv.len() != cols {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..rows {
            for (o, &b) in out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(bv.data())
            {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::lit(factor);
        self.unary(x, |v| v * c, Op::Scale(x, factor))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(x),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    /// Row-wise softmax (a rank-1 tensor is a single row).
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (rows, cols) = xv.matrix_dims();
        let mut out = xv.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let (rows, cols) = xv.matrix_dims();
        let mut out = xv.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Per-row sums, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.matrix_dims();
        let data = (0..rows)
            .map(|r| xv.data()[r * cols..(r + 1) * cols].iter().copied().sum())
            .collect();
        let out = Tensor::new(vec![rows, 1], data).expect("row sums");
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rows = self.value(*first).matrix_dims().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims();
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, cols) = xv.matrix_dims();
        if start + len > cols {
            return Err(shape_err("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { src: x, start, len },
            rg,
        ))
    }

    pub fn row_mix(&mut self, x: Var, mix: Arc<RowMix>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, cols) = xv.matrix_dims();
        if rows != mix.in_rows {
            return Err(shape_err("row_mix", xv.shape(), &[mix.in_rows, cols]));
        }
        let mut out = vec![T::zero(); mix.out_rows * cols];
        for &(o, i, w) in &mix.entries {
            let w = T::lit(w);
            let src = &xv.data()[i * cols..(i + 1) * cols];
            for (d, &s) in out[o * cols..(o + 1) * cols].iter_mut().zip(src) {
                *d += w * s;
            }
        }
        let out = Tensor::new(vec![mix.out_rows, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowMix { src: x, mix }, rg))
    }

    /// Select one column per row, `[m, n] -> [m, 1]`.
    pub fn pick(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (rows, cols) = xv.matrix_dims();
        if index.len() != rows || index.iter().any(|&i| i >= cols) {
            return Err(shape_err("pick", xv.shape(), &[index.len()]));
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &c)| xv.data()[r * cols + c])
            .collect();
        let out = Tensor::new(vec![rows, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Pick { src: x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Value-identical copy that blocks every upstream gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::Detach, false)
    }

    /// Valid (unpadded) 2-D convolution.
    ///
    /// `input` is `[c_in, H, W]` or batched `[B, c_in, H, W]`; `kernel` is
    /// `[c_out, c_in, k, k]`; the optional bias has `c_out` entries. The
    /// output keeps the input's batching: `[(B,) c_out, H', W']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let (batched, batch, c_in, h, w) = match *iv.shape() {
            [c, h, w] => (false, 1, c, h, w),
            [b, c, h, w] => (true, b, c, h, w),
            _ => return Err(shape_err("conv2d", iv.shape(), kv.shape())),
        };
        let (c_out, k) = match *kv.shape() {
            [co, ci, kh, kw] if ci == c_in && kh == kw && kh > 0 => (co, kh),
            _ => return Err(shape_err("conv2d", iv.shape(), kv.shape())),
        };
        if stride == 0 {
            return Err(TensorError::Contract(
                "conv2d stride must be positive".into(),
            ));
        }
        if k > h || k > w {
            return Err(shape_err("conv2d", iv.shape(), kv.shape()));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(shape_err("conv2d bias", kv.shape(), self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            h_out: (h - k) / stride + 1,
            w_out: (w - k) / stride + 1,
        };
        let cols = geom.im2col(iv.data());
        let (rows, patch, pos) = (batch * geom.positions(), geom.patch(), geom.positions());
        // tmp[(b,p), co] = sum_q cols[(b,p), q] * K[co, q]
        let mut tmp = vec![T::zero(); rows * c_out];
        T::gemm(
            rows,
            patch,
            c_out,
            &cols,
            (patch as isize, 1),
            kv.data(),
            (1, patch as isize),
            &mut tmp,
            false,
        );
        let mut out = vec![T::zero(); batch * c_out * pos];
        let bias_vals: Option<Vec<T>> = bias.map(|b| self.value(b).data().to_vec());
        for b in 0..batch {
            for p in 0..pos {
                for co in 0..c_out {
                    let extra = bias_vals.as_ref().map_or(T::zero(), |bv| bv[co]);
                    out[(b * c_out + co) * pos + p] = tmp[(b * pos + p) * c_out + co] + extra;
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, geom.h_out, geom.w_out]
        } else {
            vec![c_out, geom.h_out, geom.w_out]
        };
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Back-propagate from a single-element root.
    pub fn backward(&mut self, root: Var) -> Result<BackwardStats, TensorError> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::ones(self.value(root).shape()));
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            visited += 1;
            self.backprop_node(i, g, &mut adj);
        }
        self.last_stats = BackwardStats {
            nodes_recorded: self.nodes.len(),
            nodes_visited: visited,
        };
        Ok(self.last_stats)
    }

    fn send(&self, adj: &mut [Option<Tensor<T>>], to: Var, grad: Tensor<T>) {
        if !self.rg(to) {
            return;
        }
        match &mut adj[to.0] {
            Some(existing) => existing.add_assign(&grad),
            slot @ None => *slot = Some(grad),
        }
    }

    fn with_local(&self, g: &Tensor<T>, of: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let v = &self.nodes[of.0].value;
        let data = g
            .data()
            .iter()
            .zip(v.data())
            .map(|(&gi, &vi)| f(gi, vi))
            .collect();
        Tensor::new(v.shape().to_vec(), data).expect("same shape")
    }

    fn backprop_node(&mut self, i: usize, g: Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let op = self.nodes[i].op.clone();
        let out_shape = self.nodes[i].value.shape().to_vec();
        match op {
            Op::Leaf => match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(a) {
                    // ga = g * b^T
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        &mut ga,
                        false,
                    );
                    let ga = Tensor::new(av.shape().to_vec(), ga).expect("shape");
                    self.send(adj, a, ga);
                }
                if self.rg(b) {
                    // gb = a^T * g
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        &mut gb,
                        false,
                    );
                    let gb = Tensor::new(bv.shape().to_vec(), gb).expect("shape");
                    self.send(adj, b, gb);
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(bias) {
                    let bshape = self.value(bias).shape().to_vec();
                    let cols = bshape.iter().product::<usize>();
                    let mut gb = vec![T::zero(); cols];
                    for row in g.data().chunks(cols) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.send(adj, bias, Tensor::new(bshape, gb).expect("shape"));
                }
                self.send(adj, x, g);
            }
            Op::Add(a, b) => {
                self.send(adj, a, g.clone());
                self.send(adj, b, g);
            }
            Op::Sub(a, b) => {
                self.send(adj, b, g.map(|v| -v));
                self.send(adj, a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = self.with_local(&g, b, |gi, bi| gi * bi);
                    self.send(adj, a, ga);
                }
                if self.rg(b) {
                    let gb = self.with_local(&g, a, |gi, ai| gi * ai);
                    self.send(adj, b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = T::lit(c);
                self.send(adj, x, g.map(|v| v * c));
            }
            Op::Neg(x) => self.send(adj, x, g.map(|v| -v)),
            Op::Tanh(x) => {
                let gx = self.with_local(&g, Var(i), |gi, y| gi * (T::one() - y * y));
                self.send(adj, x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = self.with_local(&g, Var(i), |gi, y| gi * y * (T::one() - y));
                self.send(adj, x, gx);
            }
            Op::Relu(x) => {
                let gx =
                    self.with_local(&g, x, |gi, xi| if xi > T::zero() { gi } else { T::zero() });
                self.send(adj, x, gx);
            }
            Op::Exp(x) => {
                let gx = self.with_local(&g, Var(i), |gi, y| gi * y);
                self.send(adj, x, gx);
            }
            Op::Log(x) => {
                let gx = self.with_local(&g, x, |gi, xi| gi / xi);
                self.send(adj, x, gx);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = y.matrix_dims();
                let mut gx = g.clone();
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.send(adj, x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = y.matrix_dims();
                let mut gx = g.clone();
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let total: T = gr.iter().copied().sum();
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] = gr[c] - yr[c].exp() * total;
                    }
                }
                self.send(adj, x, gx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.value(x).shape().to_vec();
                self.send(adj, x, Tensor::full(&shape, gv));
            }
            Op::SumCols(x) => {
                let shape = self.value(x).shape().to_vec();
                let (rows, cols) = self.value(x).matrix_dims();
                let mut gx = Tensor::zeros(&shape);
                for r in 0..rows {
                    let gr = g.data()[r];
                    gx.data_mut()[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .for_each(|v| *v = gr);
                }
                self.send(adj, x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let rows = out_shape[0];
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = self.value(p).matrix_dims().1;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.send(adj, p, Tensor::new(shape, gp).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start, len } => {
                let shape = self.value(src).shape().to_vec();
                let (rows, cols) = self.value(src).matrix_dims();
                let mut gx = Tensor::zeros(&shape);
                for r in 0..rows {
                    gx.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.send(adj, src, gx);
            }
            Op::RowMix { src, mix } => {
                let shape = self.value(src).shape().to_vec();
                let cols = self.value(src).matrix_dims().1;
                let mut gx = Tensor::zeros(&shape);
                for &(o, r, w) in &mix.entries {
                    let w = T::lit(w);
                    let go = &g.data()[o * cols..(o + 1) * cols];
                    for (d, &s) in gx.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(go) {
                        *d += w * s;
                    }
                }
                self.send(adj, src, gx);
            }
            Op::Pick { src, index } => {
                let shape = self.value(src).shape().to_vec();
                let cols = self.value(src).matrix_dims().1;
                let mut gx = Tensor::zeros(&shape);
                for (r, &c) in index.iter().enumerate() {
                    gx.data_mut()[r * cols + c] = g.data()[r];
                }
                self.send(adj, src, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.send(adj, x, g.reshape(shape).expect("reshape back"));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (pos, c_out, patch) = (geom.positions(), geom.c_out, geom.patch());
                let rows = geom.batch * pos;
                // gather g into (b,p) x co layout
                let mut gt = vec![T::zero(); rows * c_out];
                for b in 0..geom.batch {
                    for co in 0..c_out {
                        for p in 0..pos {
                            gt[(b * pos + p) * c_out + co] = g.data()[(b * c_out + co) * pos + p];
                        }
                    }
                }
                if let Some(bv) = bias.filter(|&b| self.rg(b)) {
                    let mut gb = vec![T::zero(); c_out];
                    for row in gt.chunks(c_out) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(bv).shape().to_vec();
                    self.send(adj, bv, Tensor::new(shape, gb).expect("shape"));
                }
                if self.rg(kernel) {
                    let cols = geom.im2col(self.value(input).data());
                    // gK[co, q] = sum_rows gt[row, co] * cols[row, q]
                    let mut gk = vec![T::zero(); c_out * patch];
                    T::gemm(
                        c_out,
                        rows,
                        patch,
                        &gt,
                        (1, c_out as isize),
                        &cols,
                        (patch as isize, 1),
                        &mut gk,
                        false,
                    );
                    let shape = self.value(kernel).shape().to_vec();
                    self.send(adj, kernel, Tensor::new(shape, gk).expect("shape"));
                }
                if self.rg(input) {
                    let mut gcols = vec![T::zero(); rows * patch];
                    T::gemm(
                        rows,
                        c_out,
                        patch,
                        &gt,
                        (c_out as isize, 1),
                        self.value(kernel).data(),
                        (patch as isize, 1),
                        &mut gcols,
                        false,
                    );
                    let shape = self.value(input).shape().to_vec();
                    let mut gin = Tensor::zeros(&shape);
                    geom.col2im_add(&gcols, gin.data_mut());
                    self.send(adj, input, gin);
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
