//! Dense rank-≤2 arrays with tape-based reverse-mode differentiation.
//!
//! The tape is rebuilt for every training step: leaves are created from a
//! [`ParamStore`], a scalar loss is assembled through the op methods on
//! [`Tape`], and [`Tape::backward`] fills per-node gradient buffers which
//! are then folded back into the store. All math is f64; checkpoints are
//! persisted as f32.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got {0}x{1}")]
    NotScalar(usize, usize),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Row-major dense matrix. Vectors are 1xN or Nx1, scalars 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn col(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowVec(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows { parent: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    SliceCols { parent: usize, start: usize, len: usize },
    Transpose(usize),
    Logistic(usize),
    Tanh(usize),
    Abs(usize),
    /// ln(clamp(x, lo, hi)); zero gradient where the clamp is active.
    ClampLn { parent: usize, lo: f64, hi: f64 },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    PickPerRow { parent: usize, indices: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Handle into a [`Tape`]; cheap to copy, valid only for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Computation tape. Append-only during the forward pass; `backward`
/// sweeps it in reverse.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let grad = Tensor::zeros(value.rows, value.cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, grad, op });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        nodes[v.0].value.shape()
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf backed by a named parameter; its gradient flows back into the
    /// store through [`Tape::accumulate_param_grads`].
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| AutogradError::UnknownParam(name.to_string()))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac, br, bc) = {
            let nodes = self.nodes.borrow();
            let (ar, ac) = nodes[a.0].value.shape();
            let (br, bc) = nodes[b.0].value.shape();
            (ar, ac, br, bc)
        };
        if ac != br {
            return Err(AutogradError::Shape {
                op: "matmul",
                detail: format!("{ar}x{ac} * {br}x{bc}"),
            });
        }
        let out = {
            let nodes = self.nodes.borrow();
            matmul_raw(&nodes[a.0].value, &nodes[b.0].value, false, false)
        };
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn elementwise(
        &self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if av.shape() != bv.shape() {
                return Err(AutogradError::Shape {
                    op: opname,
                    detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
                });
            }
            let data = av.data.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)).collect();
            Tensor::from_vec(av.rows, av.cols, data)
        };
        Ok(self.push(out, op))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|x| x * c).collect())
        };
        self.push(out, Op::Scale(a.0, c))
    }

    /// Broadcast-add a 1xC row vector to each row of a matrix.
    pub fn add_row_vec(&self, mat: Var, row: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let m = &nodes[mat.0].value;
            let r = &nodes[row.0].value;
            if r.rows != 1 || r.cols != m.cols {
                return Err(AutogradError::Shape {
                    op: "add_row_vec",
                    detail: format!("{:?} + {:?}", m.shape(), r.shape()),
                });
            }
            let mut out = m.clone();
            for i in 0..m.rows {
                for j in 0..m.cols {
                    out.data[i * m.cols + j] += r.data[j];
                }
            }
            out
        };
        Ok(self.push(out, Op::AddRowVec(mat.0, row.0)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols != cols {
                    return Err(AutogradError::Shape {
                        op: "concat_rows",
                        detail: format!("cols {} vs {}", v.cols, cols),
                    });
                }
                rows += v.rows;
                data.extend_from_slice(&v.data);
            }
            Tensor::from_vec(rows, cols, data)
        };
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            if start + len > v.rows {
                return Err(AutogradError::Shape {
                    op: "slice_rows",
                    detail: format!("rows {}..{} of {}", start, start + len, v.rows),
                });
            }
            Tensor::from_vec(len, v.cols, v.data[start * v.cols..(start + len) * v.cols].to_vec())
        };
        Ok(self.push(out, Op::SliceRows { parent: a.0, start, len }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rows != rows {
                    return Err(AutogradError::Shape {
                        op: "concat_cols",
                        detail: format!("rows {} vs {}", v.rows, rows),
                    });
                }
                cols += v.cols;
            }
            let mut out = Tensor::zeros(rows, cols);
            let mut off = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                for i in 0..rows {
                    for j in 0..v.cols {
                        out.data[i * cols + off + j] = v.data[i * v.cols + j];
                    }
                }
                off += v.cols;
            }
            out
        };
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            if start + len > v.cols {
                return Err(AutogradError::Shape {
                    op: "slice_cols",
                    detail: format!("cols {}..{} of {}", start, start + len, v.cols),
                });
            }
            let mut out = Tensor::zeros(v.rows, len);
            for i in 0..v.rows {
                for j in 0..len {
                    out.data[i * len + j] = v.data[i * v.cols + start + j];
                }
            }
            out
        };
        Ok(self.push(out, Op::SliceCols { parent: a.0, start, len }))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let mut out = Tensor::zeros(v.cols, v.rows);
            for i in 0..v.rows {
                for j in 0..v.cols {
                    out.data[j * v.rows + i] = v.data[i * v.cols + j];
                }
            }
            out
        };
        self.push(out, Op::Transpose(a.0))
    }

    pub fn logistic(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            Tensor::from_vec(v.rows, v.cols, v.data.iter().map(|x| logistic(*x)).collect())
        };
        self.push(out, Op::Logistic(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            Tensor::from_vec(v.rows, v.cols, v.data.iter().map(|x| x.tanh()).collect())
        };
        self.push(out, Op::Tanh(a.0))
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            Tensor::from_vec(v.rows, v.cols, v.data.iter().map(|x| x.abs()).collect())
        };
        self.push(out, Op::Abs(a.0))
    }

    /// Log with the argument clamped to `[lo, hi]`.
    pub fn clamp_ln(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            Tensor::from_vec(
                v.rows,
                v.cols,
                v.data.iter().map(|x| x.clamp(lo, hi).ln()).collect(),
            )
        };
        self.push(out, Op::ClampLn { parent: a.0, lo, hi })
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            softmax_raw(&nodes[a.0].value)
        };
        self.push(out, Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let mut out = v.clone();
            for i in 0..v.rows {
                let row = &v.data[i * v.cols..(i + 1) * v.cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                for j in 0..v.cols {
                    out.data[i * v.cols + j] = v.data[i * v.cols + j] - lse;
                }
            }
            out
        };
        self.push(out, Op::LogSoftmaxRows(a.0))
    }

    /// Column vector of `a[i, indices[i]]` — target-token gather for
    /// classification losses.
    pub fn pick_per_row(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            if indices.len() != v.rows {
                return Err(AutogradError::Shape {
                    op: "pick_per_row",
                    detail: format!("{} indices for {} rows", indices.len(), v.rows),
                });
            }
            if let Some(bad) = indices.iter().find(|&&j| j >= v.cols) {
                return Err(AutogradError::Shape {
                    op: "pick_per_row",
                    detail: format!("index {} out of {} cols", bad, v.cols),
                });
            }
            Tensor::col(indices.iter().enumerate().map(|(i, &j)| v.at(i, j)).collect())
        };
        Ok(self.push(out, Op::PickPerRow { parent: a.0, indices: indices.to_vec() }))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            Tensor::scalar(nodes[a.0].value.data.iter().sum())
        };
        self.push(out, Op::SumAll(a.0))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            Tensor::scalar(v.data.iter().sum::<f64>() / v.data.len() as f64)
        };
        self.push(out, Op::MeanAll(a.0))
    }

    /// Reverse sweep from a scalar root. Repeated calls accumulate.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        {
            let r = &nodes[root.0].value;
            if !r.is_scalar() {
                return Err(AutogradError::NotScalar(r.rows, r.cols));
            }
        }
        nodes[root.0].grad.data[0] += 1.0;
        for i in (0..=root.0).rev() {
            let op = nodes[i].op.clone();
            let g = nodes[i].grad.clone();
            if g.data.iter().all(|x| *x == 0.0) {
                continue;
            }
            match op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let da = matmul_raw(&g, &nodes[b].value, false, true);
                    let db = matmul_raw(&nodes[a].value, &g, true, false);
                    add_into(&mut nodes[a].grad, &da);
                    add_into(&mut nodes[b].grad, &db);
                }
                Op::Add(a, b) => {
                    add_into(&mut nodes[a].grad, &g);
                    add_into(&mut nodes[b].grad, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut nodes[a].grad, &g);
                    sub_into(&mut nodes[b].grad, &g);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.data.iter().zip(&nodes[b].value.data).map(|(x, y)| x * y).collect();
                    let db: Vec<f64> =
                        g.data.iter().zip(&nodes[a].value.data).map(|(x, y)| x * y).collect();
                    add_slice(&mut nodes[a].grad, &da);
                    add_slice(&mut nodes[b].grad, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.data.iter().map(|x| x * c).collect();
                    add_slice(&mut nodes[a].grad, &da);
                }
                Op::AddRowVec(mat, row) => {
                    add_into(&mut nodes[mat].grad, &g);
                    let cols = g.cols;
                    let mut dr = vec![0.0; cols];
                    for i in 0..g.rows {
                        for j in 0..cols {
                            dr[j] += g.data[i * cols + j];
                        }
                    }
                    add_slice(&mut nodes[row].grad, &dr);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols;
                    let mut off = 0;
                    for p in parts {
                        let rows = nodes[p].value.rows;
                        let part: Vec<f64> = g.data[off * cols..(off + rows) * cols].to_vec();
                        add_slice(&mut nodes[p].grad, &part);
                        off += rows;
                    }
                }
                Op::SliceRows { parent, start, len: _ } => {
                    let cols = g.cols;
                    for i in 0..g.rows {
                        for j in 0..cols {
                            nodes[parent].grad.data[(start + i) * cols + j] +=
                                g.data[i * cols + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, pcols) = nodes[p].value.shape();
                        for i in 0..rows {
                            for j in 0..pcols {
                                nodes[p].grad.data[i * pcols + j] +=
                                    g.data[i * g.cols + off + j];
                            }
                        }
                        off += pcols;
                    }
                }
                Op::SliceCols { parent, start, len } => {
                    let pcols = nodes[parent].value.cols;
                    for i in 0..g.rows {
                        for j in 0..len {
                            nodes[parent].grad.data[i * pcols + start + j] +=
                                g.data[i * len + j];
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (rows, cols) = g.shape();
                    for i in 0..rows {
                        for j in 0..cols {
                            nodes[a].grad.data[j * rows + i] += g.data[i * cols + j];
                        }
                    }
                }
                Op::Logistic(a) => {
                    let y = nodes[i].value.data.clone();
                    let da: Vec<f64> =
                        g.data.iter().zip(&y).map(|(gx, s)| gx * s * (1.0 - s)).collect();
                    add_slice(&mut nodes[a].grad, &da);
                }
                Op::Tanh(a) => {
                    let y = nodes[i].value.data.clone();
                    let da: Vec<f64> =
                        g.data.iter().zip(&y).map(|(gx, t)| gx * (1.0 - t * t)).collect();
                    add_slice(&mut nodes[a].grad, &da);
                }
                Op::Abs(a) => {
                    // subgradient at 0 fixed to 0
                    let x = nodes[a].value.data.clone();
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&x)
                        .map(|(gx, v)| {
                            if *v > 0.0 {
                                *gx
                            } else if *v < 0.0 {
                                -*gx
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add_slice(&mut nodes[a].grad, &da);
                }
                Op::ClampLn { parent, lo, hi } => {
                    let x = nodes[parent].value.data.clone();
                    let da: Vec<f64> = g
                        .data
                        .iter()
                        .zip(&x)
                        .map(|(gx, v)| if *v > lo && *v < hi { gx / v } else { 0.0 })
                        .collect();
                    add_slice(&mut nodes[parent].grad, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = nodes[i].value.clone();
                    let mut da = vec![0.0; y.data.len()];
                    for r in 0..y.rows {
                        let span = r * y.cols..(r + 1) * y.cols;
                        let dot: f64 = g.data[span.clone()]
                            .iter()
                            .zip(&y.data[span.clone()])
                            .map(|(gx, s)| gx * s)
                            .sum();
                        for j in 0..y.cols {
                            let idx = r * y.cols + j;
                            da[idx] = y.data[idx] * (g.data[idx] - dot);
                        }
                    }
                    add_slice(&mut nodes[a].grad, &da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = nodes[i].value.clone();
                    let mut da = vec![0.0; y.data.len()];
                    for r in 0..y.rows {
                        let span = r * y.cols..(r + 1) * y.cols;
                        let gsum: f64 = g.data[span.clone()].iter().sum();
                        for j in 0..y.cols {
                            let idx = r * y.cols + j;
                            da[idx] = g.data[idx] - y.data[idx].exp() * gsum;
                        }
                    }
                    add_slice(&mut nodes[a].grad, &da);
                }
                Op::PickPerRow { parent, indices } => {
                    let cols = nodes[parent].value.cols;
                    for (i, &j) in indices.iter().enumerate() {
                        nodes[parent].grad.data[i * cols + j] += g.data[i];
                    }
                }
                Op::SumAll(a) => {
                    let da = vec![g.data[0]; nodes[a].value.data.len()];
                    add_slice(&mut nodes[a].grad, &da);
                }
                Op::MeanAll(a) => {
                    let n = nodes[a].value.data.len() as f64;
                    let da = vec![g.data[0] / n; nodes[a].value.data.len()];
                    add_slice(&mut nodes[a].grad, &da);
                }
            }
        }
        Ok(())
    }

    /// Fold every `Param` leaf's gradient back into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if let Op::Param(name) = &node.op {
                let entry = store
                    .params
                    .get_mut(name)
                    .ok_or_else(|| AutogradError::UnknownParam(name.clone()))?;
                add_into(&mut entry.grad, &node.grad);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (br, bc) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    debug_assert_eq!(ac, br);
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        for k in 0..ac {
            let av = if ta { a.at(k, i) } else { a.at(i, k) };
            if av == 0.0 {
                continue;
            }
            for j in 0..bc {
                let bv = if tb { b.at(j, k) } else { b.at(k, j) };
                out.data[i * bc + j] += av * bv;
            }
        }
    }
    out
}

fn softmax_raw(v: &Tensor) -> Tensor {
    let mut out = v.clone();
    for i in 0..v.rows {
        let row = &v.data[i * v.cols..(i + 1) * v.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..v.cols {
            let e = (v.data[i * v.cols + j] - m).exp();
            out.data[i * v.cols + j] = e;
            sum += e;
        }
        for j in 0..v.cols {
            out.data[i * v.cols + j] /= sum;
        }
    }
    out
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += *s;
    }
}

fn sub_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d -= *s;
    }
}

fn add_slice(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data.iter_mut().zip(src) {
        *d += *s;
    }
}

struct ParamEntry {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named trainable parameters with Adam moment buffers.
pub struct ParamStore {
    params: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let (r, c) = value.shape();
        self.params.insert(
            name.to_string(),
            ParamEntry {
                value,
                grad: Tensor::zeros(r, c),
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|e| &e.value)
    }

    pub fn get_mut_value(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad_of(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|e| &e.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|e| e.value.data.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.params.values_mut() {
            e.grad.fill(0.0);
        }
    }

    /// Adam update with bias correction; gradients are zeroed afterwards.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for e in self.params.values_mut() {
            for i in 0..e.value.data.len() {
                let g = e.grad.data[i];
                e.m.data[i] = beta1 * e.m.data[i] + (1.0 - beta1) * g;
                e.v.data[i] = beta2 * e.v.data[i] + (1.0 - beta2) * g * g;
                let mhat = e.m.data[i] / bc1;
                let vhat = e.v.data[i] / bc2;
                e.value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            e.grad.fill(0.0);
        }
    }

    pub fn values_equal(&self, other: &ParamStore) -> bool {
        if self.params.len() != other.params.len() {
            return false;
        }
        self.params.iter().all(|(k, e)| {
            other.params.get(k).map(|o| o.value == e.value).unwrap_or(false)
        })
    }

    /// Deep copy of values only (fresh moments, step 0).
    pub fn clone_values(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, e) in &self.params {
            out.insert(k, e.value.clone());
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    step: u64,
    params: Vec<(String, usize, usize)>,
}

/// Checkpoint layout: one line of JSON (version, step, names+shapes), then
/// the parameter arrays as little-endian f32 in header order.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: 1,
        step: store.step,
        params: store
            .params
            .iter()
            .map(|(k, e)| (k.clone(), e.value.rows, e.value.cols))
            .collect(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)
        .map_err(|e| AutogradError::Checkpoint(e.to_string()))?;
    f.write_all(b"\n")?;
    for e in store.params.values() {
        for v in &e.value.data {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        f.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| AutogradError::Checkpoint(e.to_string()))?;
    if header.format_version != 1 {
        return Err(AutogradError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut store = ParamStore::new();
    for (name, rows, cols) in &header.params {
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 4];
        for d in data.iter_mut() {
            f.read_exact(&mut buf)?;
            *d = f32::from_le_bytes(buf) as f64;
        }
        store.insert(name, Tensor::from_vec(*rows, *cols, data));
    }
    store.step = header.step;
    Ok(store)
}

/// Max relative error between analytic and central-difference gradients
/// over a random subsample of at least 64 coordinates.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F, h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    use rand::{Rng, SeedableRng};
    let tape = Tape::new();
    let root = loss_fn(&tape, store)?;
    let base = tape.scalar_value(root);
    if !base.is_finite() {
        return Err(AutogradError::NonFinite("grad_check loss"));
    }
    tape.backward(root)?;
    let mut analytic = store.clone_values();
    analytic.zero_grads();
    tape.accumulate_param_grads(&mut analytic)?;

    let coords: Vec<(String, usize)> = store
        .params
        .iter()
        .flat_map(|(k, e)| (0..e.value.data.len()).map(move |i| (k.clone(), i)))
        .collect();
    let total = coords.len();
    let sample_n = total.min(64.max(total / 8));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..sample_n {
        let (name, i) = coords[rng.gen_range(0..total)].clone();
        let mut probe = store.clone_values();
        probe.get_mut_value(&name).unwrap().data[i] += h;
        let tape_p = Tape::new();
        let up = tape_p.scalar_value(loss_fn(&tape_p, &probe)?);
        probe.get_mut_value(&name).unwrap().data[i] -= 2.0 * h;
        let tape_m = Tape::new();
        let down = tape_m.scalar_value(loss_fn(&tape_m, &probe)?);
        if !up.is_finite() || !down.is_finite() {
            return Err(AutogradError::NonFinite("grad_check probe"));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.grad_of(&name).unwrap().data[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    #[test]
    fn logistic_at_zero() {
        let tape = Tape::new();
        let x = tape.constant_scalar(0.0);
        let y = tape.logistic(x);
        assert_eq!(tape.scalar_value(y), 0.5);
    }

    #[test]
    fn logistic_grad_at_zero() {
        let store = store_with("x", Tensor::scalar(0.0));
        let tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.logistic(x);
        tape.backward(y).unwrap();
        let mut grads = store.clone_values();
        tape.accumulate_param_grads(&mut grads).unwrap();
        assert!((grads.grad_of("x").unwrap().data[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let y = tape.log_softmax_rows(x);
        let v = tape.value(y);
        for e in v.data {
            assert!((e - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        for i in 0..2 {
            let s: f64 = v.data[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_shape_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.matmul(a, b), Err(AutogradError::Shape { .. })));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let store = store_with("p", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let s = tape.sum_all(p);
        tape.backward(s).unwrap();
        let mut grads = store.clone_values();
        tape.accumulate_param_grads(&mut grads).unwrap();
        assert!(grads.grad_of("p").unwrap().data.iter().all(|g| *g == 1.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(AutogradError::NotScalar(2, 2))));
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let store = store_with("p", Tensor::from_vec(3, 4, data));
        let err = grad_check(
            &store,
            |tape, s| {
                let p = tape.param(s, "p")?;
                let sq = tape.mul(p, p)?;
                let half = tape.scale(sq, 0.5);
                Ok(tape.sum_all(half))
            },
            1e-5,
            7,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn grad_check_composite_expression() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert(
            "w",
            Tensor::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-0.5..0.5)).collect()),
        );
        store.insert(
            "x",
            Tensor::from_vec(3, 2, (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect()),
        );
        let err = grad_check(
            &store,
            |tape, s| {
                let w = tape.param(s, "w")?;
                let x = tape.param(s, "x")?;
                let h = tape.matmul(w, x)?;
                let t = tape.tanh(h);
                let sig = tape.logistic(t);
                let lp = tape.log_softmax_rows(sig);
                Ok(tape.mean_all(lp))
            },
            1e-5,
            7,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut store = store_with("p", Tensor::scalar(1.0));
        {
            let tape = Tape::new();
            let p = tape.param(&store, "p").unwrap();
            let s = tape.sum_all(p);
            tape.backward(s).unwrap();
            tape.accumulate_param_grads(&mut store).unwrap();
        }
        store.adam_step(0.1, 0.9, 0.999, 1e-8);
        let v = store.get("p").unwrap().data[0];
        assert!((v - 0.9).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut store = store_with("p", Tensor::scalar(1.5));
        store.adam_step(0.1, 0.9, 0.999, 1e-8);
        assert_eq!(store.get("p").unwrap().data[0], 1.5);
        assert_eq!(store.step(), 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (p - 2)^2 / 2; minimizer p* = 2
        let mut store = store_with("p", Tensor::scalar(-1.0));
        for _ in 0..200 {
            let tape = Tape::new();
            let p = tape.param(&store, "p").unwrap();
            let target = tape.constant_scalar(2.0);
            let d = tape.sub(p, target).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.scale(sq, 0.5);
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut store).unwrap();
            store.adam_step(0.05, 0.9, 0.999, 1e-8);
        }
        let p = store.get("p").unwrap().data[0];
        assert!((p - 2.0).abs() < 1e-3, "p = {p}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut store = ParamStore::new();
        store.insert("a", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        store.insert("b", Tensor::row(vec![0.5, -0.25]));
        store.step = 42;
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step(), 42);
        assert!(loaded.values_equal(&store));
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let store = store_with("p", Tensor::scalar(3.0));
        let tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let s = tape.sum_all(p);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        let mut grads = store.clone_values();
        tape.accumulate_param_grads(&mut grads).unwrap();
        assert_eq!(grads.grad_of("p").unwrap().data[0], 2.0);
    }
}
