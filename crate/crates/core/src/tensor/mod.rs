//! Dense 2-D arrays with tape-based reverse-mode differentiation.
//!
//! Every value is a row-major `rows × cols` matrix of `f64`. Vectors are
//! `1 × n` rows and scalars are `1 × 1`. Operations are recorded on a
//! [`Tape`] as they execute; [`Tape::backward`] walks the tape once in
//! reverse and returns a [`Gradients`] map.
//!
//! ```
//! use vigor_core::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::scalar(1.0));
//! let x = tape.constant(Tensor::scalar(2.0));
//! let wx = tape.mul(w, x).unwrap();
//! let sq = tape.mul(wx, wx).unwrap();
//! let grads = tape.backward(sq).unwrap();
//! assert_eq!(grads.wrt(&tape, w).data(), &[8.0]);
//! ```

pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;

use std::fmt;

pub use gradcheck::{grad_check, grad_check_extrapolated, GradCheckReport};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{Bound, ParamId, ParamStore};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left} and {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}x{}]", self.rows, self.cols)
    }
}

/// Plain row-major matrix value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(TensorError::Contract {
                op: "tensor",
                msg: format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self {
            shape: Shape::new(rows, cols),
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: Shape::new(rows, cols),
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: Shape::new(rows, cols),
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            shape: Shape::new(1, values.len()),
            data: values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Contract {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Ok(Self {
            shape: Shape::new(rows.len(), cols),
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape.cols;
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MaskRows(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    SegmentMax(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Recorded computation. Nodes are appended in evaluation order, so every
/// node's parents precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when `v` does not reach the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let s = tape.shape(v);
                Tensor::zeros(s.rows, s.cols)
            }
        }
    }
}

fn shape_err(op: &'static str, a: Shape, b: Shape) -> TensorError {
    TensorError::Shape { op, left: a, right: b }
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every piecewise choice made so far: relu input signs and
    /// segment-max winners. Two evaluations with equal signatures lie on the
    /// same smooth piece of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &a in self.value(*x).data() {
                        (a > 0.0).hash(&mut h);
                    }
                }
                Op::SegmentMax(_, arg) => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![0.0; sa.rows * sb.cols];
        kernels::gemm_nn(
            &self.value(a).data,
            &self.value(b).data,
            &mut out,
            sa.rows,
            sa.cols,
            sb.cols,
        );
        let t = self.tracked(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: Shape::new(sa.rows, sb.cols),
                data: out,
            },
            Op::MatMul(a, b),
            t,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = kernels::transpose(self.value(x));
        let t = self.tracked(&[x]);
        self.push(value, Op::Transpose(x), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape: sa, data }, Op::Add(a, b), t))
    }

    /// Adds a `1 × n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.rows != 1 || sr.cols != sx.cols {
            return Err(shape_err("add_row", sx, sr));
        }
        let r = &self.value(row).data;
        let data = self
            .value(x)
            .data
            .chunks(sx.cols.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let t = self.tracked(&[x, row]);
        Ok(self.push(Tensor { shape: sx, data }, Op::AddRow(x, row), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let t = self.tracked(&[a, b]);
        Ok(self.push(Tensor { shape: sa, data }, Op::Mul(a, b), t))
    }

    /// Multiplies row `r` by the constant `factors[r]` (Hadamard product with a
    /// row-broadcast mask).
    pub fn mask_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let sx = self.shape(x);
        if factors.len() != sx.rows {
            return Err(shape_err("mask_rows", sx, Shape::new(factors.len(), 1)));
        }
        let cols = sx.cols;
        let mut data = self.value(x).data.clone();
        for (r, f) in factors.iter().enumerate() {
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v *= f;
            }
        }
        let t = self.tracked(&[x]);
        Ok(self.push(Tensor { shape: sx, data }, Op::MaskRows(x, factors.to_vec()), t))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|a| a * c).collect();
        let shape = v.shape;
        let t = self.tracked(&[x]);
        self.push(Tensor { shape, data }, Op::Scale(x, c), t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|a| a.max(0.0)).collect();
        let shape = v.shape;
        let t = self.tracked(&[x]);
        self.push(Tensor { shape, data }, Op::Relu(x), t)
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data.iter().any(|a| a.is_nan()) {
            return Err(TensorError::NonFinite { op: "row_softmax" });
        }
        let mut out = v.clone();
        kernels::softmax_rows(&mut out);
        let t = self.tracked(&[x]);
        Ok(self.push(out, Op::Softmax(x), t))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let (sg, sb) = (self.shape(gain), self.shape(bias));
        if sx.cols == 0 {
            return Err(TensorError::Contract {
                op: "layer_norm",
                msg: "rows must have at least one column".into(),
            });
        }
        if sg != Shape::new(1, sx.cols) {
            return Err(shape_err("layer_norm", sx, sg));
        }
        if sb != sg {
            return Err(shape_err("layer_norm", sg, sb));
        }
        let n = sx.cols;
        let xv = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; sx.rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..sx.rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape: sx, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
        ))
    }

    /// Stacks matrices vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Contract {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = self.shape(*first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.cols != cols {
                return Err(shape_err("concat_rows", self.shape(*first), s));
            }
            rows += s.rows;
            data.extend_from_slice(&self.value(p).data);
        }
        let t = self.tracked(parts);
        Ok(self.push(
            Tensor {
                shape: Shape::new(rows, cols),
                data,
            },
            Op::ConcatRows(parts.to_vec()),
            t,
        ))
    }

    /// Places matrices side by side; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Contract {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.shape(*first).rows;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.rows != rows {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
            cols += s.cols;
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let pc = v.shape.cols;
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc].copy_from_slice(v.row_slice(r));
            }
            offset += pc;
        }
        let t = self.tracked(parts);
        Ok(self.push(
            Tensor {
                shape: Shape::new(rows, cols),
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            t,
        ))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.rows {
            return Err(shape_err("slice_rows", s, Shape::new(start + len, s.cols)));
        }
        let data = self.value(x).data[start * s.cols..(start + len) * s.cols].to_vec();
        let t = self.tracked(&[x]);
        Ok(self.push(
            Tensor {
                shape: Shape::new(len, s.cols),
                data,
            },
            Op::SliceRows(x, start),
            t,
        ))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.cols {
            return Err(shape_err("slice_cols", s, Shape::new(s.rows, start + len)));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(s.rows * len);
        for r in 0..s.rows {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let t = self.tracked(&[x]);
        Ok(self.push(
            Tensor {
                shape: Shape::new(s.rows, len),
                data,
            },
            Op::SliceCols(x, start),
            t,
        ))
    }

    /// Column-wise mean, giving a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.rows == 0 {
            return Err(TensorError::Contract {
                op: "mean_rows",
                msg: "no rows".into(),
            });
        }
        let v = self.value(x);
        let mut data = vec![0.0; s.cols];
        for r in 0..s.rows {
            for (d, a) in data.iter_mut().zip(v.row_slice(r)) {
                *d += a;
            }
        }
        let inv = 1.0 / s.rows as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let t = self.tracked(&[x]);
        Ok(self.push(
            Tensor {
                shape: Shape::new(1, s.cols),
                data,
            },
            Op::MeanRows(x),
            t,
        ))
    }

    /// Column-wise max over consecutive row groups. `lengths[g]` rows form
    /// group `g`; the output has one row per group. Ties go to the first row.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if lengths.iter().sum::<usize>() != s.rows || lengths.contains(&0) {
            return Err(TensorError::Contract {
                op: "segment_max",
                msg: format!("segments {lengths:?} do not tile {} rows", s.rows),
            });
        }
        let v = self.value(x);
        let mut data = vec![f64::NEG_INFINITY; lengths.len() * s.cols];
        let mut arg = vec![0usize; lengths.len() * s.cols];
        let mut r0 = 0;
        for (g, &len) in lengths.iter().enumerate() {
            for r in r0..r0 + len {
                for (c, &a) in v.row_slice(r).iter().enumerate() {
                    let k = g * s.cols + c;
                    if a > data[k] {
                        data[k] = a;
                        arg[k] = r;
                    }
                }
            }
            r0 += len;
        }
        let t = self.tracked(&[x]);
        Ok(self.push(
            Tensor {
                shape: Shape::new(lengths.len(), s.cols),
                data,
            },
            Op::SegmentMax(x, arg),
            t,
        ))
    }

    /// Row lookup, as used for embedding tables.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= s.rows) {
            return Err(TensorError::Contract {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {s}"),
            });
        }
        let v = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * s.cols);
        for &i in indices {
            data.extend_from_slice(v.row_slice(i));
        }
        let t = self.tracked(&[table]);
        Ok(self.push(
            Tensor {
                shape: Shape::new(indices.len(), s.cols),
                data,
            },
            Op::Gather(table, indices.to_vec()),
            t,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        let t = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), t)
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let s = self.shape(logits);
        if s.rows != 1 {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!("expected a single row of logits, got {s}"),
            });
        }
        if target >= s.cols {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!("target {target} out of range for {} classes", s.cols),
            });
        }
        let v = self.value(logits);
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let lse = kernels::log_sum_exp(&v.data);
        let loss = lse - v.data[target];
        let probs = v.data.iter().map(|a| (a - lse).exp()).collect();
        let t = self.tracked(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, t))
    }

    /// Mean binary cross-entropy with logits against constant 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != targets.len() || targets.is_empty() {
            return Err(shape_err("bce_with_logits", s, Shape::new(targets.len(), 1)));
        }
        let v = self.value(logits);
        let n = targets.len() as f64;
        let loss = v
            .data
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let t = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            t,
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let s = self.shape(pred);
        if s != target.shape || s.is_empty() {
            return Err(shape_err("mse", s, target.shape));
        }
        let loss = self
            .value(pred)
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / s.len() as f64;
        let t = self.tracked(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data.clone(),
            },
            t,
        ))
    }

    /// Reverse pass from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != Shape::new(1, 1) {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be a scalar, got {s}"),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out_shape = node.value.shape;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.nodes[a.0].tracked {
                    let mut da = vec![0.0; sa.len()];
                    kernels::gemm_nt(&g.data, &self.value(*b).data, &mut da, sa.rows, sb.cols, sa.cols);
                    self.accumulate(grads, *a, Tensor { shape: sa, data: da });
                }
                if self.nodes[b.0].tracked {
                    let mut db = vec![0.0; sb.len()];
                    kernels::gemm_tn(&self.value(*a).data, &g.data, &mut db, sa.rows, sa.cols, sb.cols);
                    self.accumulate(grads, *b, Tensor { shape: sb, data: db });
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, kernels::transpose(g)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                let cols = out_shape.cols;
                let mut dr = vec![0.0; cols];
                for chunk in g.data.chunks(cols.max(1)) {
                    for (d, a) in dr.iter_mut().zip(chunk) {
                        *d += a;
                    }
                }
                self.accumulate(grads, *row, Tensor::row(dr));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
                let db = g.data.iter().zip(&va.data).map(|(x, y)| x * y).collect();
                self.accumulate(
                    grads,
                    *a,
                    Tensor {
                        shape: out_shape,
                        data: da,
                    },
                );
                self.accumulate(
                    grads,
                    *b,
                    Tensor {
                        shape: out_shape,
                        data: db,
                    },
                );
            }
            Op::MaskRows(x, factors) => {
                let cols = out_shape.cols;
                let mut d = g.data.clone();
                for (r, f) in factors.iter().enumerate() {
                    for v in &mut d[r * cols..(r + 1) * cols] {
                        *v *= f;
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: out_shape,
                        data: d,
                    },
                );
            }
            Op::Scale(x, c) => {
                let d = g.data.iter().map(|a| a * c).collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: out_shape,
                        data: d,
                    },
                );
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: out_shape,
                        data: d,
                    },
                );
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = out_shape.cols;
                let mut d = vec![0.0; out_shape.len()];
                for r in 0..out_shape.rows {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: out_shape,
                        data: d,
                    },
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out_shape.cols;
                let gv = &self.value(*gain).data;
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; out_shape.len()];
                for r in 0..out_shape.rows {
                    let gr = g.row_slice(r);
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..n {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gv[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                    }
                    let nf = n as f64;
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        dx[r * n + c] = inv_std[r] / nf * (nf * dh - sum_dh - hr[c] * sum_dh_h);
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: out_shape,
                        data: dx,
                    },
                );
                self.accumulate(grads, *gain, Tensor::row(dgain));
                self.accumulate(grads, *bias, Tensor::row(dbias));
            }
            Op::ConcatRows(parts) => {
                let cols = out_shape.cols;
                let mut r0 = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let d = g.data[r0 * cols..(r0 + s.rows) * cols].to_vec();
                    self.accumulate(grads, p, Tensor { shape: s, data: d });
                    r0 += s.rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let mut d = Vec::with_capacity(s.len());
                    for r in 0..s.rows {
                        d.extend_from_slice(&g.row_slice(r)[offset..offset + s.cols]);
                    }
                    self.accumulate(grads, p, Tensor { shape: s, data: d });
                    offset += s.cols;
                }
            }
            Op::SliceRows(x, start) => {
                let s = self.shape(*x);
                let mut d = vec![0.0; s.len()];
                d[start * s.cols..start * s.cols + g.data.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *x, Tensor { shape: s, data: d });
            }
            Op::SliceCols(x, start) => {
                let s = self.shape(*x);
                let mut d = vec![0.0; s.len()];
                let len = out_shape.cols;
                for r in 0..s.rows {
                    d[r * s.cols + start..r * s.cols + start + len].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *x, Tensor { shape: s, data: d });
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let inv = 1.0 / s.rows as f64;
                let mut d = Vec::with_capacity(s.len());
                for _ in 0..s.rows {
                    d.extend(g.data.iter().map(|a| a * inv));
                }
                self.accumulate(grads, *x, Tensor { shape: s, data: d });
            }
            Op::SegmentMax(x, arg) => {
                let s = self.shape(*x);
                let mut d = vec![0.0; s.len()];
                for (k, &src) in arg.iter().enumerate() {
                    let c = k % s.cols;
                    d[src * s.cols + c] += g.data[k];
                }
                self.accumulate(grads, *x, Tensor { shape: s, data: d });
            }
            Op::Gather(table, indices) => {
                let s = self.shape(*table);
                let mut d = vec![0.0; s.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, a) in d[i * s.cols..(i + 1) * s.cols].iter_mut().zip(g.row_slice(r)) {
                        *dst += a;
                    }
                }
                self.accumulate(grads, *table, Tensor { shape: s, data: d });
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(s.rows, s.cols, g.item()));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let gi = g.item();
                let mut d: Vec<f64> = probs.iter().map(|p| p * gi).collect();
                d[*target] -= gi;
                let s = self.shape(*logits);
                self.accumulate(grads, *logits, Tensor { shape: s, data: d });
            }
            Op::BceLogits { logits, targets } => {
                let gi = g.item() / targets.len() as f64;
                let v = self.value(*logits);
                let d = v
                    .data
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (kernels::sigmoid(z) - y) * gi)
                    .collect();
                self.accumulate(
                    grads,
                    *logits,
                    Tensor {
                        shape: v.shape,
                        data: d,
                    },
                );
            }
            Op::Mse { pred, target } => {
                let v = self.value(*pred);
                let c = 2.0 * g.item() / target.len() as f64;
                let d = v.data.iter().zip(target).map(|(p, y)| c * (p - y)).collect();
                self.accumulate(
                    grads,
                    *pred,
                    Tensor {
                        shape: v.shape,
                        data: d,
                    },
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = tape.constant(Tensor::identity(2));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(out), &m);

        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let out = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let expected = triple_loop(&a, &b);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let out = tape.matmul(av, bv).unwrap();
        let diff = tape
            .value(out)
            .data()
            .iter()
            .zip(&expected)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]"), "{msg}");
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: Shape::new(2, 3),
                right: Shape::new(2, 3)
            }
        );
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::row(vec![1000.0, 1000.0]));
        let y = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let y = tape.row_softmax(x).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| (v - 3.0).exp()).sum();
        for (i, got) in tape.value(y).data().iter().enumerate() {
            let want = ((i as f64 + 1.0) - 3.0).exp() / denom;
            assert!((got - want).abs() <= 1e-12);
        }

        let x = tape.constant(Tensor::row(vec![f64::NAN, 0.0]));
        assert_eq!(
            tape.row_softmax(x).unwrap_err(),
            TensorError::NonFinite { op: "row_softmax" }
        );
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::filled(1, 3, 1.0));
        let zeros3 = tape.constant(Tensor::zeros(1, 3));
        let x = tape.constant(Tensor::row(vec![4.0, 4.0, 4.0]));
        let y = tape.layer_norm(x, ones, zeros3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::filled(1, 2, 1.0));
        let b = tape.constant(Tensor::zeros(1, 2));
        let x = tape.constant(Tensor::row(vec![1.0, -1.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        // mean 0, variance 1: out = ±1/sqrt(1 + eps)
        let want = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        let out = tape.value(y).data();
        assert!((out[0] - want).abs() < 1e-15 && (out[1] + want).abs() < 1e-15);
        assert!((out[0].abs() - 1.0).abs() <= 1e-3);

        let g0 = tape.constant(Tensor::zeros(1, 2));
        let bias = tape.constant(Tensor::row(vec![0.25, -3.0]));
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![-2.0, 7.0]]).unwrap());
        let y = tape.layer_norm(x, g0, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -3.0, 0.25, -3.0]);
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let a = tape.constant(Tensor::filled(2, 3, 1.0));
        let b = tape.constant(Tensor::new(3, 3, (0..9).map(f64::from).collect()).unwrap());
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), Shape::new(5, 3));
        assert_eq!(&tape.value(c).data()[..6], &[1.0; 6]);
        assert_eq!(&tape.value(c).data()[6..], tape.value(b).data());

        let one = tape.constant(Tensor::row(vec![3.0, -2.0]));
        let m = tape.mean_rows(one).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, -2.0]);

        let bad = tape.constant(Tensor::zeros(2, 2));
        assert!(tape.concat_rows(&[a, bad]).is_err());
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(3, 4, 0.3));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, x), Tensor::filled(3, 4, 1.0));
    }

    #[test]
    fn backward_hand_derivative() {
        // (w*x - y)^2 at w=1, x=2, y=0 -> d/dw = 2 (wx - y) x = 8
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(1.0));
        let x = tape.constant(Tensor::scalar(2.0));
        let y = tape.constant(Tensor::scalar(0.0));
        let wx = tape.mul(w, x).unwrap();
        let neg_y = tape.scale(y, -1.0);
        let r = tape.add(wx, neg_y).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.wrt(&tape, w).data(), &[8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeros_unreachable() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        let unused = tape.leaf(Tensor::zeros(1, 3));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract { .. })));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, unused), Tensor::zeros(1, 3));
    }

    #[test]
    fn segment_max_and_gather() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![0.0, 0.0]]).unwrap());
        let m = tape.segment_max(x, &[2, 1]).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0, 0.0, 0.0]);
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, x).data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let rows = tape.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows).data(), &[3.0, 1.0, 3.0]);
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(&tape, table).data(), &[1.0, 0.0, 2.0]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..5,
            cols in 1usize..7,
            seed in any::<u64>(),
            spread in 0.0f64..800.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| rng.gen_range(-spread..=spread)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(rows, cols, data).unwrap());
            let y = tape.row_softmax(x).unwrap();
            for r in 0..rows {
                let row = tape.value(y).row_slice(r);
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
