//! Dense f64 tensors with taped reverse-mode automatic differentiation.
//!
//! Execution is eager: every differentiable op runs immediately and records
//! itself on a [`Graph`]. `backward` replays the tape in reverse creation
//! order (which is a valid reverse topological order) exactly once.
//! Everything is 64-bit and single-threaded per graph, so forward and
//! backward results are bit-deterministic for a fixed op sequence.

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Build a 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("from_rows", "ragged rows".to_string()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn first(&self) -> f64 {
        self.data[0]
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn has_nonfinite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxLastDim(Var),
    LogSoftmaxLastDim(Var),
    MeanRows(Var),
    SumAll(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Conv1dDilated { x: Var, w: Var, b: Var, dilation: usize },
    SmoothL1Mean { pred: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    nonfinite: bool,
    op: Op,
}

/// Tape of executed differentiable operations.
///
/// Create one per forward pass; parameters are re-registered each pass via
/// [`Graph::leaf`] so gradient state never leaks between passes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    empty_softmax_rows: usize,
}

// C[m,n] += A[m,k] * B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// C[m,k] += A[m,n] * B[k,n]^T
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of softmax rows whose inputs were entirely masked (-inf).
    pub fn empty_softmax_rows(&self) -> usize {
        self.empty_softmax_rows
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Register a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Register a non-differentiable input (features, masks, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let nonfinite = value.has_nonfinite();
        self.nodes.push(Node { value, grad: None, requires_grad, nonfinite, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn nonfinite_in(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].nonfinite)
    }

    /// Push an op result. NaN is always an error; ±inf is an error unless an
    /// input already carried a non-finite value (mask arithmetic).
    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut nonfinite = false;
        let inputs_nonfinite = self.nonfinite_in(inputs);
        for &v in &value.data {
            if v.is_nan() {
                return Err(Error::NonFinite { op: op_name, msg: "NaN in output".to_string() });
            }
            if v.is_infinite() {
                if !inputs_nonfinite {
                    return Err(Error::NonFinite {
                        op: op_name,
                        msg: "infinite output from finite inputs".to_string(),
                    });
                }
                nonfinite = true;
            }
        }
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(Node { value, grad: None, requires_grad, nonfinite, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn want_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::shape(op, format!("expected rank-2, got shape {:?}", t.shape)));
        }
        Ok((t.shape[0], t.shape[1]))
    }

    // ── structural ops ───────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", t.shape, shape),
            ));
        }
        let value = Tensor { shape, data: t.data.clone() };
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.want_2d("transpose", x)?;
        let xd = &self.value(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let value = Tensor { shape: vec![c, r], data };
        self.push("transpose", value, Op::Transpose(x), &[x])
    }

    /// Concatenate rank-2 tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts".to_string()));
        }
        let (_, c0) = self.want_2d("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.want_2d("concat_rows", p)?;
            if c != c0 {
                return Err(Error::shape("concat_rows", format!("column mismatch {} vs {}", c, c0)));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let value = Tensor { shape: vec![rows, c0], data };
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Extract rows `start..end` (end exclusive) of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.want_2d("slice_rows", x)?;
        if start >= end || end > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} out of range for {} rows", start, end, r),
            ));
        }
        let data = self.value(x).data[start * c..end * c].to_vec();
        let value = Tensor { shape: vec![end - start, c], data };
        self.push("slice_rows", value, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts".to_string()));
        }
        let (r0, _) = self.want_2d("concat_cols", parts[0])?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.want_2d("concat_cols", p)?;
            if r != r0 {
                return Err(Error::shape("concat_cols", format!("row mismatch {} vs {}", r, r0)));
            }
            cols += c;
        }
        let mut data = vec![0.0; r0 * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.shape[1];
            for i in 0..r0 {
                data[i * cols + offset..i * cols + offset + c]
                    .copy_from_slice(&t.data[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let value = Tensor { shape: vec![r0, cols], data };
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.want_2d("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} out of range for {} cols", start, end, c),
            ));
        }
        let xd = &self.value(x).data;
        let w = end - start;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&xd[i * c + start..i * c + end]);
        }
        let value = Tensor { shape: vec![r, w], data };
        self.push("slice_cols", value, Op::SliceCols(x, start), &[x])
    }

    // ── arithmetic ops ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.want_2d("matmul", a)?;
        let (k2, n) = self.want_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {} vs {}", k, k2)));
        }
        let mut data = vec![0.0; m * n];
        matmul_nn(&self.value(a).data, &self.value(b).data, m, k, n, &mut data);
        let value = Tensor { shape: vec![m, n], data };
        self.push("matmul", value, Op::Matmul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Add a rank-1 bias of length D to every row of a rank-2 [R×D] tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.want_2d("add_bias", x)?;
        let tb = self.value(b);
        if tb.rank() != 1 || tb.numel() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias shape {:?} does not match {} columns", tb.shape, c),
            ));
        }
        let xd = &self.value(x).data;
        let bd = &self.value(b).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        let value = Tensor { shape: vec![r, c], data };
        self.push("add_bias", value, Op::AddBias(x, b), &[x, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor { shape: ta.shape.clone(), data };
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v * s).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        self.push("mul_scalar", value, Op::MulScalar(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v.exp()).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        self.push("exp", value, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data.iter().map(|v| v.ln()).collect();
        let value = Tensor { shape: t.shape.clone(), data };
        self.push("log", value, Op::Log(x), &[x])
    }

    /// Mean over rows of an [R×D] tensor, producing a length-D vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.want_2d("mean_rows", x)?;
        let xd = &self.value(x).data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += xd[i * c + j];
            }
        }
        let inv = 1.0 / r as f64;
        for v in &mut data {
            *v *= inv;
        }
        let value = Tensor { shape: vec![c], data };
        self.push("mean_rows", value, Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data.iter().sum();
        let value = Tensor::scalar(s);
        self.push("sum_all", value, Op::SumAll(x), &[x])
    }

    /// Row-wise softmax over the last dimension, stabilized by max
    /// subtraction. -inf inputs map to exactly 0; an all-(-inf) row yields an
    /// all-zero row and bumps the empty-attention-row counter.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let rows = t.numel() / cols;
        let xd = &t.data;
        let mut data = vec![0.0; t.numel()];
        let mut empty = 0;
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                empty += 1;
                continue; // all masked: leave the output row at zero
            }
            let out = &mut data[i * cols..(i + 1) * cols];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            let inv = 1.0 / sum;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let shape = t.shape.clone();
        self.empty_softmax_rows += empty;
        let value = Tensor { shape, data };
        self.push("softmax_lastdim", value, Op::SoftmaxLastDim(x), &[x])
    }

    /// Row-wise log-softmax; inputs must be finite (no attention masks here).
    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.has_nonfinite() {
            return Err(Error::NonFinite {
                op: "log_softmax_lastdim",
                msg: "masked inputs are not supported".to_string(),
            });
        }
        let cols = t.cols();
        let rows = t.numel() / cols;
        let xd = &t.data;
        let mut data = vec![0.0; t.numel()];
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in data[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = t.shape.clone();
        let value = Tensor { shape, data };
        self.push("log_softmax_lastdim", value, Op::LogSoftmaxLastDim(x), &[x])
    }

    /// Temporal dilated convolution with zero same-padding.
    ///
    /// `x`: [T×Cin], `w`: [k×Cin×Cout], `b`: [Cout]; output [T×Cout] where
    /// out[t] = b + Σ_tap x[t + (tap-k/2)·dilation] · w[tap].
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (time, cin) = self.want_2d("conv1d_dilated", x)?;
        let tw = self.value(w);
        if tw.rank() != 3 || tw.shape[1] != cin {
            return Err(Error::shape(
                "conv1d_dilated",
                format!("weight shape {:?} does not match {} input channels", tw.shape, cin),
            ));
        }
        let (k, cout) = (tw.shape[0], tw.shape[2]);
        let tb = self.value(b);
        if tb.rank() != 1 || tb.numel() != cout {
            return Err(Error::shape("conv1d_dilated", format!("bias shape {:?}", tb.shape)));
        }
        if dilation == 0 {
            return Err(Error::Contract("conv1d_dilated: dilation must be >= 1".to_string()));
        }
        let xd = &self.value(x).data;
        let wd = &self.value(w).data;
        let bd = &self.value(b).data;
        let half = (k / 2) as isize;
        let mut data = vec![0.0; time * cout];
        for t in 0..time {
            let out = &mut data[t * cout..(t + 1) * cout];
            out.copy_from_slice(bd);
            for tap in 0..k {
                let src = t as isize + (tap as isize - half) * dilation as isize;
                if src < 0 || src >= time as isize {
                    continue;
                }
                let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                let wtap = &wd[tap * cin * cout..(tap + 1) * cin * cout];
                for (p, &xv) in xrow.iter().enumerate() {
                    let wrow = &wtap[p * cout..(p + 1) * cout];
                    for (o, &wv) in out.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor { shape: vec![time, cout], data };
        self.push("conv1d_dilated", value, Op::Conv1dDilated { x, w, b, dilation }, &[x, w, b])
    }

    /// Smooth-L1 between `pred` and a constant target, summed elementwise and
    /// averaged over rows. Quadratic inside |d|<1, linear outside.
    pub fn smooth_l1_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape != target.shape {
            return Err(Error::shape(
                "smooth_l1_mean",
                format!("{:?} vs {:?}", tp.shape, target.shape),
            ));
        }
        if tp.rank() != 2 {
            return Err(Error::shape("smooth_l1_mean", "expected rank-2".to_string()));
        }
        let rows = tp.shape[0] as f64;
        let mut total = 0.0;
        for (&p, &t) in tp.data.iter().zip(&target.data) {
            let d = p - t;
            total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
        }
        let value = Tensor::scalar(total / rows);
        self.push(
            "smooth_l1_mean",
            value,
            Op::SmoothL1Mean { pred, target: target.clone() },
            &[pred],
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// requires-grad node the loss depends on. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; build a new forward pass first".to_string(),
            ));
        }
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape
            )));
        }
        if !loss_node.requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any differentiable leaf".to_string(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let g = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.value(a).shape[0], self.value(a).shape[1]);
                    let n = self.value(b).shape[1];
                    if self.requires(a) {
                        let mut da = vec![0.0; m * k];
                        matmul_nt(&g, &self.value(b).data, m, n, k, &mut da);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let mut db = vec![0.0; k * n];
                        matmul_tn(&self.value(a).data, &g, m, k, n, &mut db);
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (self.value(x).shape[0], self.value(x).shape[1]);
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::AddBias(x, b) => {
                    self.accumulate(x, &g);
                    if self.requires(b) {
                        let c = self.value(b).numel();
                        let rows = g.len() / c;
                        let mut db = vec![0.0; c];
                        for i in 0..rows {
                            for j in 0..c {
                                db[j] += g[i * c + j];
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires(a) {
                        let da: Vec<f64> =
                            g.iter().zip(&self.value(b).data).map(|(gv, bv)| gv * bv).collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<f64> =
                            g.iter().zip(&self.value(a).data).map(|(gv, av)| gv * av).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::MulScalar(x, s) => {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * s).collect();
                    self.accumulate(x, &dx);
                }
                Op::Relu(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.value(x).data)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Exp(x) => {
                    let dx: Vec<f64> =
                        g.iter().zip(&self.nodes[idx].value.data).map(|(gv, yv)| gv * yv).collect();
                    self.accumulate(x, &dx);
                }
                Op::Log(x) => {
                    let dx: Vec<f64> =
                        g.iter().zip(&self.value(x).data).map(|(gv, xv)| gv / xv).collect();
                    self.accumulate(x, &dx);
                }
                Op::SoftmaxLastDim(x) => {
                    let y = &self.nodes[idx].value;
                    let cols = y.cols();
                    let rows = y.numel() / cols;
                    let mut dx = vec![0.0; y.numel()];
                    for i in 0..rows {
                        let yr = &y.data[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..cols {
                            dx[i * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LogSoftmaxLastDim(x) => {
                    let y = &self.nodes[idx].value;
                    let cols = y.cols();
                    let rows = y.numel() / cols;
                    let mut dx = vec![0.0; y.numel()];
                    for i in 0..rows {
                        let yr = &y.data[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..cols {
                            dx[i * cols + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::MeanRows(x) => {
                    let (r, c) = (self.value(x).shape[0], self.value(x).shape[1]);
                    let inv = 1.0 / r as f64;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j] * inv;
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::SumAll(x) => {
                    let dx = vec![g[0]; self.value(x).numel()];
                    self.accumulate(x, &dx);
                }
                Op::Reshape(x) => {
                    self.accumulate(x, &g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(p).numel();
                        let piece = g[offset..offset + n].to_vec();
                        self.accumulate(p, &piece);
                        offset += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let c = self.value(x).shape[1];
                    let total = self.value(x).numel();
                    let mut dx = vec![0.0; total];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let rows = self.nodes[idx].value.shape[0];
                    let cols = self.nodes[idx].value.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(p).shape[1];
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * cols + offset..i * cols + offset + c]);
                        }
                        self.accumulate(p, &dp);
                        offset += c;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = (self.value(x).shape[0], self.value(x).shape[1]);
                    let w = self.nodes[idx].value.shape[1];
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + w]
                            .copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.accumulate(x, &dx);
                }
                Op::Conv1dDilated { x, w, b, dilation } => {
                    let (time, cin) = (self.value(x).shape[0], self.value(x).shape[1]);
                    let (k, cout) = (self.value(w).shape[0], self.value(w).shape[2]);
                    let half = (k / 2) as isize;
                    if self.requires(x) {
                        let wd = self.value(w).data.clone();
                        let mut dx = vec![0.0; time * cin];
                        for t in 0..time {
                            let grow = &g[t * cout..(t + 1) * cout];
                            for tap in 0..k {
                                let src = t as isize + (tap as isize - half) * dilation as isize;
                                if src < 0 || src >= time as isize {
                                    continue;
                                }
                                let wtap = &wd[tap * cin * cout..(tap + 1) * cin * cout];
                                let dxrow =
                                    &mut dx[src as usize * cin..(src as usize + 1) * cin];
                                for (p, d) in dxrow.iter_mut().enumerate() {
                                    let wrow = &wtap[p * cout..(p + 1) * cout];
                                    let mut acc = 0.0;
                                    for (&gv, &wv) in grow.iter().zip(wrow) {
                                        acc += gv * wv;
                                    }
                                    *d += acc;
                                }
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                    if self.requires(w) {
                        let xd = self.value(x).data.clone();
                        let mut dw = vec![0.0; k * cin * cout];
                        for t in 0..time {
                            let grow = &g[t * cout..(t + 1) * cout];
                            for tap in 0..k {
                                let src = t as isize + (tap as isize - half) * dilation as isize;
                                if src < 0 || src >= time as isize {
                                    continue;
                                }
                                let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                                let dwtap = &mut dw[tap * cin * cout..(tap + 1) * cin * cout];
                                for (p, &xv) in xrow.iter().enumerate() {
                                    let dwrow = &mut dwtap[p * cout..(p + 1) * cout];
                                    for (d, &gv) in dwrow.iter_mut().zip(grow) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                        self.accumulate(w, &dw);
                    }
                    if self.requires(b) {
                        let mut db = vec![0.0; cout];
                        for t in 0..time {
                            for j in 0..cout {
                                db[j] += g[t * cout + j];
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::SmoothL1Mean { pred, target } => {
                    let tp = self.value(pred);
                    let rows = tp.shape[0] as f64;
                    let scale = g[0] / rows;
                    let dp: Vec<f64> = tp
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(&p, &t)| {
                            let d = p - t;
                            scale * if d.abs() < 1.0 { d } else { d.signum() }
                        })
                        .collect();
                    self.accumulate(pred, &dp);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grads, max_grad_error, rel_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Loss = sum(y ⊙ w) with fixed pseudo-random weights, so that gradients
    /// through ops with row-sum symmetries (softmax) stay informative.
    fn weighted_loss(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.value(y).shape().to_vec();
        let w = randn(&mut rng, shape);
        let wv = g.constant(w);
        let prod = g.mul(y, wv)?;
        g.sum_all(prod)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_basis_selection() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, vec![3, 4]);
        let b = randn(&mut rng, vec![4, 2]);
        let f = |g: &mut Graph, vs: &[Var]| {
            let y = g.matmul(vs[0], vs[1])?;
            g.sum_all(y)
        };
        let err = max_grad_error(&f, &[a, b], 1e-5).unwrap();
        assert!(err < 1e-6, "matmul grad rel err {}", err);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entry_is_exactly_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![f64::NEG_INFINITY, 0.0]]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_scalar_oracle() {
        // Independent evaluation of exp/sum for the row [1,2,3].
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let expected: Vec<f64> = e.iter().map(|v| v / s).collect();

        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_flags_and_zeroes() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::from_rows(&[vec![f64::NEG_INFINITY, f64::NEG_INFINITY], vec![0.0, 1.0]])
                .unwrap(),
        );
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.empty_softmax_rows(), 1);
        assert_eq!(g.value(y).row(0), &[0.0, 0.0]);
        let sum: f64 = g.value(y).row(1).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let rows = rng.gen_range(1..5);
            let cols = rng.gen_range(1..7);
            let x = randn(&mut rng, vec![rows, cols]);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = g.softmax_lastdim(xv).unwrap();
            for i in 0..rows {
                let s: f64 = g.value(y).row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(g.value(y).row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, vec![2, 5]);
        let f = |g: &mut Graph, vs: &[Var]| {
            let y = g.softmax_lastdim(vs[0])?;
            weighted_loss(g, y, 99)
        };
        let err = max_grad_error(&f, &[x], 1e-5).unwrap();
        assert!(err < 1e-5, "softmax grad rel err {}", err);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, vec![3, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let sm = g.softmax_lastdim(xv).unwrap();
        let log_sm = g.log(sm).unwrap();
        let lsm = g.log_softmax_lastdim(xv).unwrap();
        assert!(g.value(lsm).max_abs_diff(g.value(log_sm)) < 1e-12);
    }

    #[test]
    fn elementwise_ops_trivial_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let rows = g.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![2.0, 3.0]]).unwrap());
        let m = g.mean_rows(rows).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 3.0]);
    }

    #[test]
    fn slice_concat_roundtrip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, vec![6, 3]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let top = g.slice_rows(xv, 0, 2).unwrap();
        let mid = g.slice_rows(xv, 2, 5).unwrap();
        let bot = g.slice_rows(xv, 5, 6).unwrap();
        let back = g.concat_rows(&[top, mid, bot]).unwrap();
        assert_eq!(g.value(back).data(), x.data());

        let left = g.slice_cols(xv, 0, 1).unwrap();
        let right = g.slice_cols(xv, 1, 3).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back).data(), x.data());
    }

    #[test]
    fn slice_out_of_range_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(g.slice_rows(x, 1, 5).is_err());
        assert!(g.slice_cols(x, 2, 2).is_err());
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        // Inputs shifted away from relu's kink at 0 and log's domain edge.
        let x = {
            let mut t = randn(&mut rng, vec![2, 3]);
            for v in t.data_mut() {
                *v = v.abs() + 0.5;
            }
            t
        };
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>)> = vec![
            ("relu", Box::new(|g, vs| {
                let y = g.relu(vs[0])?;
                weighted_loss(g, y, 1)
            })),
            ("exp", Box::new(|g, vs| {
                let y = g.exp(vs[0])?;
                weighted_loss(g, y, 2)
            })),
            ("log", Box::new(|g, vs| {
                let y = g.log(vs[0])?;
                weighted_loss(g, y, 3)
            })),
            ("mul_scalar", Box::new(|g, vs| {
                let y = g.mul_scalar(vs[0], -1.7)?;
                weighted_loss(g, y, 4)
            })),
            ("mean_rows", Box::new(|g, vs| {
                let y = g.mean_rows(vs[0])?;
                weighted_loss(g, y, 5)
            })),
            ("transpose", Box::new(|g, vs| {
                let y = g.transpose(vs[0])?;
                weighted_loss(g, y, 6)
            })),
            ("reshape", Box::new(|g, vs| {
                let y = g.reshape(vs[0], vec![3, 2])?;
                weighted_loss(g, y, 7)
            })),
            ("slice_rows", Box::new(|g, vs| {
                let y = g.slice_rows(vs[0], 0, 1)?;
                weighted_loss(g, y, 8)
            })),
            ("slice_cols", Box::new(|g, vs| {
                let y = g.slice_cols(vs[0], 1, 3)?;
                weighted_loss(g, y, 9)
            })),
        ];
        for (name, f) in cases {
            let err = max_grad_error(&f, &[x.clone()], 1e-5).unwrap();
            assert!(err < 1e-5, "{} grad rel err {}", name, err);
        }
    }

    #[test]
    fn binary_op_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = randn(&mut rng, vec![2, 3]);
        let b = randn(&mut rng, vec![2, 3]);
        let bias = randn(&mut rng, vec![3]);

        let f = |g: &mut Graph, vs: &[Var]| {
            let y = g.add(vs[0], vs[1])?;
            weighted_loss(g, y, 10)
        };
        assert!(max_grad_error(&f, &[a.clone(), b.clone()], 1e-5).unwrap() < 1e-5);

        let f = |g: &mut Graph, vs: &[Var]| {
            let y = g.mul(vs[0], vs[1])?;
            weighted_loss(g, y, 11)
        };
        assert!(max_grad_error(&f, &[a.clone(), b], 1e-5).unwrap() < 1e-5);

        let f = |g: &mut Graph, vs: &[Var]| {
            let y = g.add_bias(vs[0], vs[1])?;
            weighted_loss(g, y, 12)
        };
        assert!(max_grad_error(&f, &[a, bias], 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn concat_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = randn(&mut rng, vec![1, 3]);
        let b = randn(&mut rng, vec![2, 3]);
        let f = |g: &mut Graph, vs: &[Var]| {
            let y = g.concat_rows(&[vs[0], vs[1]])?;
            weighted_loss(g, y, 13)
        };
        assert!(max_grad_error(&f, &[a, b], 1e-5).unwrap() < 1e-5);

        let a = randn(&mut rng, vec![2, 2]);
        let b = randn(&mut rng, vec![2, 1]);
        let f = |g: &mut Graph, vs: &[Var]| {
            let y = g.concat_cols(&[vs[0], vs[1]])?;
            weighted_loss(g, y, 14)
        };
        assert!(max_grad_error(&f, &[a, b], 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn conv1d_impulse_stencil() {
        // Impulse at frame 4, dilation 2, k=3: contributions land at 2, 4, 6.
        let mut g = Graph::new();
        let mut x = Tensor::zeros(vec![9, 1]);
        x.data_mut()[4] = 1.0;
        let xv = g.constant(x);
        let w = g.constant(Tensor::new(vec![3, 1, 1], vec![0.25, 0.5, 0.125]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv1d_dilated(xv, w, b, 2).unwrap();
        let out = g.value(y).data();
        // Left tap of frame 6 reads frame 4; right tap of frame 2 reads frame 4.
        let mut expected = vec![0.0; 9];
        expected[2] = 0.125;
        expected[4] = 0.5;
        expected[6] = 0.25;
        assert_eq!(out, &expected[..]);
    }

    #[test]
    fn conv1d_single_frame_center_tap() {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap());
        // k=3, cin=2, cout=1; only the center tap can fire for T=1.
        let w = g.constant(
            Tensor::new(vec![3, 2, 1], vec![9.0, 9.0, 0.5, 0.25, 9.0, 9.0]).unwrap(),
        );
        let b = g.constant(Tensor::vector(vec![0.1]));
        let y = g.conv1d_dilated(xv, w, b, 1).unwrap();
        let expected = 0.1 + 2.0 * 0.5 + (-1.0) * 0.25;
        assert!((g.value(y).first() - expected).abs() < 1e-15);
    }

    #[test]
    fn conv1d_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = randn(&mut rng, vec![7, 2]);
        let w = randn(&mut rng, vec![3, 2, 2]);
        let b = randn(&mut rng, vec![2]);
        for dilation in [1usize, 2, 4] {
            let f = move |g: &mut Graph, vs: &[Var]| {
                let y = g.conv1d_dilated(vs[0], vs[1], vs[2], dilation)?;
                weighted_loss(g, y, 15)
            };
            let err = max_grad_error(&f, &[x.clone(), w.clone(), b.clone()], 1e-5).unwrap();
            assert!(err < 1e-5, "conv dilation {} rel err {}", dilation, err);
        }
    }

    #[test]
    fn smooth_l1_scalar_oracle_and_grad() {
        // Mixed quadratic / linear regions, away from the kink at |d| = 1.
        let pred = Tensor::from_rows(&[vec![0.3, -2.0], vec![1.8, 0.0]]).unwrap();
        let target = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.5]]).unwrap();
        let expected = (0.5 * 0.3 * 0.3 + (2.0 - 0.5) + (1.8 - 0.5) + 0.5 * 0.5 * 0.5) / 2.0;

        let mut g = Graph::new();
        let pv = g.leaf(pred.clone());
        let loss = g.smooth_l1_mean(pv, &target).unwrap();
        assert!((g.value(loss).first() - expected).abs() < 1e-12);

        let t2 = target.clone();
        let f = move |g: &mut Graph, vs: &[Var]| g.smooth_l1_mean(vs[0], &t2);
        assert!(max_grad_error(&f, &[pred], 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![5.0, -3.0, 0.2]));
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_quadratic_analytic() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_composite_mlp_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = randn(&mut rng, vec![2, 3]);
        let w1 = randn(&mut rng, vec![3, 4]);
        let b1 = randn(&mut rng, vec![4]);
        let w2 = randn(&mut rng, vec![4, 3]);
        let f = |g: &mut Graph, vs: &[Var]| {
            let h = g.matmul(vs[0], vs[1])?;
            let h = g.add_bias(h, vs[2])?;
            let h = g.relu(h)?;
            let h = g.matmul(h, vs[3])?;
            let y = g.softmax_lastdim(h)?;
            weighted_loss(g, y, 16)
        };
        let err = max_grad_error(&f, &[x, w1, b1, w2], 1e-5).unwrap();
        assert!(err < 1e-4, "composite rel err {}", err);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]));
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_non_scalar_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_from_finite_inputs_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn mask_arithmetic_is_permitted() {
        let mut g = Graph::new();
        let scores = g.constant(Tensor::from_rows(&[vec![0.5, 0.7]]).unwrap());
        let mask = g.constant(Tensor::from_rows(&[vec![0.0, f64::NEG_INFINITY]]).unwrap());
        let masked = g.add(scores, mask).unwrap();
        let y = g.softmax_lastdim(masked).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let a = randn(&mut rng, vec![4, 4]);
        let b = randn(&mut rng, vec![4, 4]);
        let run = || {
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let bv = g.constant(b.clone());
            let m = g.matmul(av, bv).unwrap();
            let s = g.softmax_lastdim(m).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finite_diff_helper_rejects_nothing_valid() {
        // rel_error floor: tiny absolute differences count as equal.
        assert_eq!(rel_error(1e-12, -1e-12, 1e-8), 0.0);
        assert!(rel_error(1.0, 1.1, 1e-8) > 0.0);
        // finite_diff_grads on a linear function is exact.
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |g: &mut Graph, vs: &[Var]| g.sum_all(vs[0]);
        let grads = finite_diff_grads(&f, &[x], 1e-5).unwrap();
        for &v in grads[0].data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
