//! Tape-based reverse-mode differentiation over dense matrix primitives.
//!
//! A [`Tape`] records every primitive applied to tensors created on it, in
//! topological order (every input of a node was produced earlier). Calling
//! [`backward`] on a 1x1 loss walks the tape in reverse and accumulates
//! gradients into every tensor that requires them.
//!
//! Gradient semantics: `backward` *accumulates*. Running it twice on the
//! same tape doubles the stored gradients; callers that want fresh
//! gradients record a fresh tape (the training loop records one tape per
//! episode and reads leaf gradients off it before the optimizer step).
//!
//! The primitive set is intentionally small: dense matmul, elementwise
//! arithmetic, row softmax / log-softmax, row layer norm, relu, sigmoid,
//! pooling and broadcasting over rows, column concatenation, pairwise
//! row cosine similarity, per-row minima, a global max, and a DTW
//! cumulative cost. Min, max, and DTW are differentiable almost
//! everywhere; at ties the subgradient follows the lowest-index winner.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;
/// Floor on the product of row norms in cosine similarity. Zero-vector
/// rows are legal inputs, and the self-similarity of any nonzero frame is
/// exactly 1 (so self-distance is exactly 0).
pub const COSINE_EPS: f64 = 1e-8;

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddScalar { a: usize },
    Scale { a: usize, factor: f64 },
    MulElem { a: usize, b: usize },
    Transpose { a: usize },
    RowSoftmax { a: usize },
    RowLogSoftmax { a: usize },
    LayerNormRows { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sigmoid { a: usize },
    GlobalAvgPoolRows { a: usize },
    BroadcastRow { a: usize },
    ConcatCols { a: usize, b: usize, cols_a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    CosineSimRows { a: usize, b: usize },
    RowMin { a: usize, argmin: Vec<usize> },
    MaxAll { a: usize, arg_row: usize, arg_col: usize },
    DtwCost { a: usize, path: Vec<(usize, usize)>, norm: f64 },
    SliceRows { a: usize, start: usize },
    ConcatRows { a: usize, b: usize, rows_a: usize },
    ScaleByScalar { a: usize, s: usize },
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

impl TapeInner {
    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> usize {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        self.nodes.len() - 1
    }
}

/// Recording tape. Cheap to clone (shared handle); confined to one thread.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A handle to one recorded value on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Rc<RefCell<TapeInner>>,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a leaf value. Leaves with `requires_grad` receive gradients
    /// from [`backward`].
    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Tensor {
        let idx = self.inner.borrow_mut().push(value, requires_grad, Op::Leaf);
        Tensor { tape: Rc::clone(&self.inner), idx }
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Matrix) -> Tensor {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(Matrix::scalar(v))
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Tensor {
    /// Handle to the tape this tensor lives on.
    pub fn tape(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    pub fn value(&self) -> Matrix {
        self.tape.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.tape.borrow();
        inner.nodes[self.idx].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.borrow().nodes[self.idx].requires_grad
    }

    /// Accumulated gradient, if `backward` has reached this tensor.
    pub fn grad(&self) -> Option<Matrix> {
        self.tape.borrow().nodes[self.idx].grad.clone()
    }

    /// Value of a 1x1 tensor.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.borrow();
        inner.nodes[self.idx].value.scalar_value()
    }

    fn same_tape(&self, other: &Tensor) -> Result<()> {
        if Rc::ptr_eq(&self.tape, &other.tape) {
            Ok(())
        } else {
            Err(Error::DetachedTensor)
        }
    }

    fn record(&self, value: Matrix, parents: &[usize], op: Op) -> Tensor {
        let mut inner = self.tape.borrow_mut();
        let requires = parents.iter().any(|&p| inner.nodes[p].requires_grad);
        let idx = inner.push(value, requires, op);
        Tensor { tape: Rc::clone(&self.tape), idx }
    }

    fn value_ref<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.tape.borrow().nodes[self.idx].value)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.borrow();
            inner.nodes[self.idx].value.matmul(&inner.nodes[other.idx].value)?
        };
        Ok(self.record(value, &[self.idx, other.idx], Op::Matmul { a: self.idx, b: other.idx }))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.borrow();
            inner.nodes[self.idx].value.add(&inner.nodes[other.idx].value)?
        };
        Ok(self.record(value, &[self.idx, other.idx], Op::Add { a: self.idx, b: other.idx }))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let value = self.value_ref(|m| m.scale(factor));
        self.record(value, &[self.idx], Op::Scale { a: self.idx, factor })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let value = self.value_ref(|m| m.map(|v| v + c));
        self.record(value, &[self.idx], Op::AddScalar { a: self.idx })
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.borrow();
            inner.nodes[self.idx].value.mul_elem(&inner.nodes[other.idx].value)?
        };
        Ok(self.record(value, &[self.idx, other.idx], Op::MulElem { a: self.idx, b: other.idx }))
    }

    pub fn transpose(&self) -> Tensor {
        let value = self.value_ref(|m| m.transpose());
        self.record(value, &[self.idx], Op::Transpose { a: self.idx })
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&self) -> Tensor {
        let value = self.value_ref(row_softmax_matrix);
        self.record(value, &[self.idx], Op::RowSoftmax { a: self.idx })
    }

    /// Numerically stable log-softmax over each row.
    pub fn row_log_softmax(&self) -> Tensor {
        let value = self.value_ref(|m| {
            let mut out = m.clone();
            for r in 0..m.rows() {
                let row = m.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                for c in 0..m.cols() {
                    out.set(r, c, m.get(r, c) - lse);
                }
            }
            out
        });
        self.record(value, &[self.idx], Op::RowLogSoftmax { a: self.idx })
    }

    /// Normalizes each row to zero mean, unit variance (no affine part;
    /// compose with `mul_elem`/`add` on broadcast gain and bias tensors).
    pub fn layer_norm_rows(&self) -> Tensor {
        let value = self.value_ref(|m| {
            let mut out = m.clone();
            for r in 0..m.rows() {
                let (mean, inv_std) = row_moments(m.row(r));
                for c in 0..m.cols() {
                    out.set(r, c, (m.get(r, c) - mean) * inv_std);
                }
            }
            out
        });
        self.record(value, &[self.idx], Op::LayerNormRows { a: self.idx })
    }

    pub fn relu(&self) -> Tensor {
        let value = self.value_ref(|m| m.map(|v| v.max(0.0)));
        self.record(value, &[self.idx], Op::Relu { a: self.idx })
    }

    pub fn exp(&self) -> Tensor {
        let value = self.value_ref(|m| m.map(f64::exp));
        self.record(value, &[self.idx], Op::Exp { a: self.idx })
    }

    pub fn log(&self) -> Tensor {
        let value = self.value_ref(|m| m.map(f64::ln));
        self.record(value, &[self.idx], Op::Log { a: self.idx })
    }

    pub fn sigmoid(&self) -> Tensor {
        let value = self.value_ref(|m| m.map(|v| 1.0 / (1.0 + (-v).exp())));
        self.record(value, &[self.idx], Op::Sigmoid { a: self.idx })
    }

    /// T x C -> 1 x C mean over rows.
    pub fn global_avg_pool_rows(&self) -> Tensor {
        let value = self.value_ref(Matrix::mean_rows);
        self.record(value, &[self.idx], Op::GlobalAvgPoolRows { a: self.idx })
    }

    /// 1 x C -> rows x C by repetition.
    pub fn broadcast_row(&self, rows: usize) -> Result<Tensor> {
        let value = self.value_ref(|m| {
            if m.rows() != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "broadcast_row needs a 1xC input, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            let mut out = Matrix::zeros(rows, m.cols());
            for r in 0..rows {
                for c in 0..m.cols() {
                    out.set(r, c, m.get(0, c));
                }
            }
            Ok(out)
        })?;
        Ok(self.record(value, &[self.idx], Op::BroadcastRow { a: self.idx }))
    }

    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (value, cols_a) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            if a.rows() != b.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols {}x{} with {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
            let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    out.set(r, c, a.get(r, c));
                }
                for c in 0..b.cols() {
                    out.set(r, a.cols() + c, b.get(r, c));
                }
            }
            (out, a.cols())
        };
        Ok(self.record(
            value,
            &[self.idx, other.idx],
            Op::ConcatCols { a: self.idx, b: other.idx, cols_a },
        ))
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&self) -> Tensor {
        let value = self.value_ref(|m| Matrix::scalar(m.sum()));
        self.record(value, &[self.idx], Op::SumAll { a: self.idx })
    }

    /// Mean of all entries as a 1x1 tensor.
    pub fn mean(&self) -> Tensor {
        let value = self.value_ref(|m| Matrix::scalar(m.sum() / (m.rows() * m.cols()) as f64));
        self.record(value, &[self.idx], Op::MeanAll { a: self.idx })
    }

    /// Pairwise cosine similarity between rows: (Ta x C, Tb x C) -> Ta x Tb
    /// with entry (i, j) = dot(a_i, b_j) / (|a_i| * |b_j| + eps).
    pub fn cosine_similarity_rows(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            if a.cols() != b.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "cosine_similarity_rows channel mismatch: {} vs {}",
                    a.cols(),
                    b.cols()
                )));
            }
            cosine_sim_matrix(a, b)
        };
        Ok(self.record(
            value,
            &[self.idx, other.idx],
            Op::CosineSimRows { a: self.idx, b: other.idx },
        ))
    }

    /// Per-row minimum: T x M -> T x 1. Ties resolve to the lowest column,
    /// and the backward pass routes the row gradient to that entry.
    pub fn row_min(&self) -> Tensor {
        let (value, argmin) = self.value_ref(|m| {
            let mut out = Matrix::zeros(m.rows(), 1);
            let mut argmin = Vec::with_capacity(m.rows());
            for r in 0..m.rows() {
                let (j, v) = argmin_slice(m.row(r));
                out.set(r, 0, v);
                argmin.push(j);
            }
            (out, argmin)
        });
        self.record(value, &[self.idx], Op::RowMin { a: self.idx, argmin })
    }

    /// Global maximum as a 1x1 tensor; ties resolve to the first entry in
    /// row-major order.
    pub fn max_all(&self) -> Tensor {
        let (value, arg_row, arg_col) = self.value_ref(|m| {
            let mut best = f64::NEG_INFINITY;
            let (mut br, mut bc) = (0, 0);
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    if m.get(r, c) > best {
                        best = m.get(r, c);
                        br = r;
                        bc = c;
                    }
                }
            }
            (Matrix::scalar(best), br, bc)
        });
        self.record(value, &[self.idx], Op::MaxAll { a: self.idx, arg_row, arg_col })
    }

    /// Dynamic-time-warping cumulative cost over a frame-distance matrix,
    /// steps {(1,0),(0,1),(1,1)}, anchored at both corners, normalized by
    /// (Ta + Tb). The backward pass routes gradient along the optimal
    /// warping path (ties prefer diagonal, then vertical, then horizontal).
    pub fn dtw_cost(&self) -> Tensor {
        let (value, path, norm) = self.value_ref(|m| {
            let (cost, path) = dtw_forward(m);
            let norm = (m.rows() + m.cols()) as f64;
            (Matrix::scalar(cost / norm), path, norm)
        });
        self.record(value, &[self.idx], Op::DtwCost { a: self.idx, path, norm })
    }

    /// Contiguous row slice `[start, start + len)`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let value = self.value_ref(|m| {
            if start + len > m.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "slice_rows [{start}, {}) out of {} rows",
                    start + len,
                    m.rows()
                )));
            }
            let mut out = Matrix::zeros(len, m.cols());
            for r in 0..len {
                for c in 0..m.cols() {
                    out.set(r, c, m.get(start + r, c));
                }
            }
            Ok(out)
        })?;
        Ok(self.record(value, &[self.idx], Op::SliceRows { a: self.idx, start }))
    }

    /// Stacks `other` below `self`; both must have the same column count.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        self.same_tape(other)?;
        let (value, rows_a) = {
            let inner = self.tape.borrow();
            let a = &inner.nodes[self.idx].value;
            let b = &inner.nodes[other.idx].value;
            if a.cols() != b.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows {}x{} with {}x{}",
                    a.rows(),
                    a.cols(),
                    b.rows(),
                    b.cols()
                )));
            }
            let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
            data.extend_from_slice(a.data());
            data.extend_from_slice(b.data());
            (
                Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)?,
                a.rows(),
            )
        };
        Ok(self.record(
            value,
            &[self.idx, other.idx],
            Op::ConcatRows { a: self.idx, b: other.idx, rows_a },
        ))
    }

    /// Multiplies every entry by a learnable 1x1 tensor.
    pub fn scale_by_scalar(&self, s: &Tensor) -> Result<Tensor> {
        self.same_tape(s)?;
        let value = {
            let inner = self.tape.borrow();
            let sv = &inner.nodes[s.idx].value;
            if sv.shape() != (1, 1) {
                return Err(Error::ShapeMismatch(format!(
                    "scale_by_scalar needs a 1x1 scale, got {}x{}",
                    sv.rows(),
                    sv.cols()
                )));
            }
            inner.nodes[self.idx].value.scale(sv.scalar_value())
        };
        Ok(self.record(
            value,
            &[self.idx, s.idx],
            Op::ScaleByScalar { a: self.idx, s: s.idx },
        ))
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn row_softmax_matrix(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for c in 0..m.cols() {
            out.set(r, c, exps[c] / total);
        }
    }
    out
}

fn cosine_sim_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let na: Vec<f64> = (0..a.rows()).map(|r| a.row_norm(r)).collect();
    let nb: Vec<f64> = (0..b.rows()).map(|r| b.row_norm(r)).collect();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.set(i, j, dot / (na[i] * nb[j]).max(COSINE_EPS));
        }
    }
    out
}

fn argmin_slice(row: &[f64]) -> (usize, f64) {
    let mut best = f64::INFINITY;
    let mut arg = 0;
    for (j, &v) in row.iter().enumerate() {
        if v < best {
            best = v;
            arg = j;
        }
    }
    (arg, best)
}

pub(crate) fn dtw_forward(d: &Matrix) -> (f64, Vec<(usize, usize)>) {
    let (ta, tb) = d.shape();
    let mut cum = Matrix::filled(ta, tb, f64::INFINITY);
    // 0 = start, 1 = diagonal, 2 = vertical, 3 = horizontal
    let mut from = vec![0u8; ta * tb];
    for a in 0..ta {
        for b in 0..tb {
            let here = d.get(a, b);
            if a == 0 && b == 0 {
                cum.set(0, 0, here);
                continue;
            }
            let mut best = f64::INFINITY;
            let mut step = 0u8;
            if a > 0 && b > 0 && cum.get(a - 1, b - 1) < best {
                best = cum.get(a - 1, b - 1);
                step = 1;
            }
            if a > 0 && cum.get(a - 1, b) < best {
                best = cum.get(a - 1, b);
                step = 2;
            }
            if b > 0 && cum.get(a, b - 1) < best {
                best = cum.get(a, b - 1);
                step = 3;
            }
            cum.set(a, b, here + best);
            from[a * tb + b] = step;
        }
    }
    let mut path = Vec::with_capacity(ta + tb);
    let (mut a, mut b) = (ta - 1, tb - 1);
    loop {
        path.push((a, b));
        match from[a * tb + b] {
            1 => {
                a -= 1;
                b -= 1;
            }
            2 => a -= 1,
            3 => b -= 1,
            _ => break,
        }
    }
    path.reverse();
    (cum.get(ta - 1, tb - 1), path)
}

/// Runs reverse-mode accumulation from `loss` (which must be 1x1) down the
/// tape. Every tensor with `requires_grad` reachable from the loss ends up
/// with this call's gradient *added* to its stored gradient, so two calls
/// double the result.
pub fn backward(loss: &Tensor) -> Result<()> {
    let mut inner = loss.tape.borrow_mut();
    {
        let node = &inner.nodes[loss.idx];
        let (r, c) = node.value.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar { rows: r, cols: c });
        }
    }

    // Per-call scratch keeps one backward pass independent of gradients
    // already stored on the tape by earlier calls.
    let mut scratch: Vec<Option<Matrix>> = Vec::with_capacity(loss.idx + 1);
    scratch.resize_with(loss.idx + 1, || None);
    scratch[loss.idx] = Some(Matrix::scalar(1.0));

    for i in (0..=loss.idx).rev() {
        if !inner.nodes[i].requires_grad {
            scratch[i] = None;
            continue;
        }
        let Some(g) = scratch[i].take() else { continue };
        propagate(&inner.nodes, i, &g, &mut scratch)?;
        seed_grad(&mut inner.nodes[i], &g);
    }
    Ok(())
}

fn seed_grad(node: &mut Node, g: &Matrix) {
    match node.grad.as_mut() {
        Some(existing) => existing.accumulate(g),
        None => node.grad = Some(g.clone()),
    }
}

fn add_to(nodes: &[Node], scratch: &mut [Option<Matrix>], idx: usize, update: Matrix) {
    if !nodes[idx].requires_grad {
        return;
    }
    match scratch[idx].as_mut() {
        Some(existing) => existing.accumulate(&update),
        None => scratch[idx] = Some(update),
    }
}

fn propagate(
    nodes: &[Node],
    idx: usize,
    g: &Matrix,
    scratch: &mut [Option<Matrix>],
) -> Result<()> {
    let node = &nodes[idx];
    let parents = nodes;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let da = g.matmul(&parents[*b].value.transpose())?;
            let db = parents[*a].value.transpose().matmul(g)?;
            add_to(parents, scratch, *a, da);
            add_to(parents, scratch, *b, db);
        }
        Op::Add { a, b } => {
            add_to(parents, scratch, *a, g.clone());
            add_to(parents, scratch, *b, g.clone());
        }
        Op::AddScalar { a } => add_to(parents, scratch, *a, g.clone()),
        Op::Scale { a, factor } => add_to(parents, scratch, *a, g.scale(*factor)),
        Op::MulElem { a, b } => {
            let da = g.mul_elem(&parents[*b].value)?;
            let db = g.mul_elem(&parents[*a].value)?;
            add_to(parents, scratch, *a, da);
            add_to(parents, scratch, *b, db);
        }
        Op::Transpose { a } => add_to(parents, scratch, *a, g.transpose()),
        Op::RowSoftmax { a } => {
            let y = &node.value;
            let mut dx = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gi, yi)| gi * yi).sum();
                for c in 0..y.cols() {
                    dx.set(r, c, (g.get(r, c) - dot) * y.get(r, c));
                }
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::RowLogSoftmax { a } => {
            let x = &parents[*a].value;
            let probs = row_softmax_matrix(x);
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for c in 0..x.cols() {
                    dx.set(r, c, g.get(r, c) - probs.get(r, c) * gsum);
                }
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::LayerNormRows { a } => {
            let x = &parents[*a].value;
            let y = &node.value;
            let n = x.cols() as f64;
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let (_, inv_std) = row_moments(x.row(r));
                let g_mean: f64 = g.row(r).iter().sum::<f64>() / n;
                let gy_mean: f64 =
                    g.row(r).iter().zip(y.row(r)).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
                for c in 0..x.cols() {
                    dx.set(r, c, inv_std * (g.get(r, c) - g_mean - y.get(r, c) * gy_mean));
                }
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::Relu { a } => {
            let x = &parents[*a].value;
            let mut dx = g.clone();
            for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *d = 0.0;
                }
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::Exp { a } => add_to(parents, scratch, *a, g.mul_elem(&node.value)?),
        Op::Log { a } => {
            let x = &parents[*a].value;
            let mut dx = g.clone();
            for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                *d /= xv;
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::Sigmoid { a } => {
            let y = &node.value;
            let mut dx = g.clone();
            for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                *d *= yv * (1.0 - yv);
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::GlobalAvgPoolRows { a } => {
            let rows = parents[*a].value.rows();
            let mut dx = Matrix::zeros(rows, node.value.cols());
            let inv = 1.0 / rows as f64;
            for r in 0..rows {
                for c in 0..node.value.cols() {
                    dx.set(r, c, g.get(0, c) * inv);
                }
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::BroadcastRow { a } => {
            let mut dx = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    dx.add_at(0, c, g.get(r, c));
                }
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::ConcatCols { a, b, cols_a } => {
            let cols_b = g.cols() - cols_a;
            let mut da = Matrix::zeros(g.rows(), *cols_a);
            let mut db = Matrix::zeros(g.rows(), cols_b);
            for r in 0..g.rows() {
                for c in 0..*cols_a {
                    da.set(r, c, g.get(r, c));
                }
                for c in 0..cols_b {
                    db.set(r, c, g.get(r, cols_a + c));
                }
            }
            add_to(parents, scratch, *a, da);
            add_to(parents, scratch, *b, db);
        }
        Op::SumAll { a } => {
            let (r, c) = parents[*a].value.shape();
            add_to(parents, scratch, *a, Matrix::filled(r, c, g.scalar_value()));
        }
        Op::MeanAll { a } => {
            let (r, c) = parents[*a].value.shape();
            add_to(parents, scratch, *a, Matrix::filled(r, c, g.scalar_value() / (r * c) as f64));
        }
        Op::CosineSimRows { a, b } => {
            let av = &parents[*a].value;
            let bv = &parents[*b].value;
            let s = &node.value;
            let na: Vec<f64> = (0..av.rows()).map(|r| av.row_norm(r)).collect();
            let nb: Vec<f64> = (0..bv.rows()).map(|r| bv.row_norm(r)).collect();
            let mut da = Matrix::zeros(av.rows(), av.cols());
            let mut db = Matrix::zeros(bv.rows(), bv.cols());
            for i in 0..av.rows() {
                for j in 0..bv.rows() {
                    let gij = g.get(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    let q = na[i] * nb[j];
                    let p = q.max(COSINE_EPS);
                    let sij = s.get(i, j);
                    // Below the norm-product floor the denominator is
                    // constant, so only the numerator term survives.
                    let (ra, rb) = if q >= COSINE_EPS {
                        (sij * nb[j] / (na[i] * p), sij * na[i] / (nb[j] * p))
                    } else {
                        (0.0, 0.0)
                    };
                    for c in 0..av.cols() {
                        da.add_at(i, c, gij * (bv.get(j, c) / p - ra * av.get(i, c)));
                        db.add_at(j, c, gij * (av.get(i, c) / p - rb * bv.get(j, c)));
                    }
                }
            }
            add_to(parents, scratch, *a, da);
            add_to(parents, scratch, *b, db);
        }
        Op::RowMin { a, argmin } => {
            let (r, c) = parents[*a].value.shape();
            let mut dx = Matrix::zeros(r, c);
            for (row, &col) in argmin.iter().enumerate() {
                dx.add_at(row, col, g.get(row, 0));
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::MaxAll { a, arg_row, arg_col } => {
            let (r, c) = parents[*a].value.shape();
            let mut dx = Matrix::zeros(r, c);
            dx.add_at(*arg_row, *arg_col, g.scalar_value());
            add_to(parents, scratch, *a, dx);
        }
        Op::DtwCost { a, path, norm } => {
            let (r, c) = parents[*a].value.shape();
            let mut dx = Matrix::zeros(r, c);
            let gv = g.scalar_value() / norm;
            for &(pa, pb) in path {
                dx.add_at(pa, pb, gv);
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::SliceRows { a, start } => {
            let (r, c) = parents[*a].value.shape();
            let mut dx = Matrix::zeros(r, c);
            for row in 0..g.rows() {
                for col in 0..c {
                    dx.set(start + row, col, g.get(row, col));
                }
            }
            add_to(parents, scratch, *a, dx);
        }
        Op::ConcatRows { a, b, rows_a } => {
            let cols = g.cols();
            let rows_b = g.rows() - rows_a;
            let mut da = Matrix::zeros(*rows_a, cols);
            let mut db = Matrix::zeros(rows_b, cols);
            for r in 0..*rows_a {
                for c in 0..cols {
                    da.set(r, c, g.get(r, c));
                }
            }
            for r in 0..rows_b {
                for c in 0..cols {
                    db.set(r, c, g.get(rows_a + r, c));
                }
            }
            add_to(parents, scratch, *a, da);
            add_to(parents, scratch, *b, db);
        }
        Op::ScaleByScalar { a, s } => {
            let sv = parents[*s].value.scalar_value();
            add_to(parents, scratch, *a, g.scale(sv));
            let ds: f64 = g
                .data()
                .iter()
                .zip(parents[*a].value.data())
                .map(|(gi, ai)| gi * ai)
                .sum();
            add_to(parents, scratch, *s, Matrix::scalar(ds));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.uniform_range(-1.0, 1.0));
            }
        }
        m
    }

    /// Central finite differences against the analytic gradient of
    /// `scalar = f(inputs)`, checked per coordinate at relative tolerance
    /// 1e-4 with an absolute floor.
    fn fd_check(inputs: &[Matrix], f: impl Fn(&[Tensor]) -> Tensor) {
        let tape = Tape::new();
        let leaves: Vec<Tensor> =
            inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let loss = f(&leaves);
        backward(&loss).unwrap();

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let grad = leaves[k].grad().unwrap_or_else(|| {
                Matrix::zeros(input.rows(), input.cols())
            });
            for r in 0..input.rows() {
                for c in 0..input.cols() {
                    let eval = |delta: f64| {
                        let t = Tape::new();
                        let mut perturbed: Vec<Matrix> = inputs.to_vec();
                        perturbed[k].set(r, c, input.get(r, c) + delta);
                        let ls: Vec<Tensor> =
                            perturbed.into_iter().map(|m| t.leaf(m, false)).collect();
                        f(&ls).scalar_value()
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let analytic = grad.get(r, c);
                    let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                    assert!(
                        (numeric - analytic).abs() / denom < 1e-4,
                        "input {k} at ({r},{c}): analytic {analytic} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn row_softmax_uniform_on_equal_logits() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![0.0, 0.0]]));
        let y = x.row_softmax().value();
        assert!((y.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((y.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let tape = Tape::new();
        let i2 = tape.constant(Matrix::identity(2));
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let t = tape.constant(m.clone());
        assert_eq!(i2.matmul(&t).unwrap().value(), m);
    }

    #[test]
    fn global_avg_pool_is_columnwise_mean() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]));
        assert_eq!(
            x.global_avg_pool_rows().value(),
            Matrix::from_rows(&[vec![2.0, 4.0]])
        );
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]), true);
        backward(&x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn backward_of_quadratic() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0]]), true);
        let loss = x.mul_elem(&x).unwrap().sum();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), Matrix::from_rows(&[vec![2.0, 4.0]]));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2), true);
        assert!(matches!(
            backward(&x.relu()),
            Err(Error::NotScalar { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn mixing_tapes_is_detached() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Matrix::zeros(1, 2), true);
        let b = t2.leaf(Matrix::zeros(1, 2), true);
        assert!(matches!(a.add(&b), Err(Error::DetachedTensor)));
    }

    #[test]
    fn backward_accumulates_when_called_twice() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![3.0]]), true);
        let loss = x.scale(2.0);
        backward(&loss).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().scalar_value(), 4.0);
    }

    #[test]
    fn constants_receive_no_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(2.0), true);
        let c = tape.constant(Matrix::scalar(5.0));
        let loss = x.mul_elem(&c).unwrap().sum();
        backward(&loss).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap().scalar_value(), 5.0);
    }

    #[test]
    fn fd_matmul() {
        let mut rng = Rng::new(100);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        fd_check(&[a, b], |t| t[0].matmul(&t[1]).unwrap().sum());
    }

    #[test]
    fn fd_add_scale_mul() {
        let mut rng = Rng::new(101);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 2, 3);
        fd_check(&[a, b], |t| {
            t[0].scale(1.7)
                .add(&t[1]).unwrap()
                .mul_elem(&t[0]).unwrap()
                .add_scalar(0.3)
                .sum()
        });
    }

    #[test]
    fn fd_row_softmax() {
        let mut rng = Rng::new(102);
        let a = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 3, 4);
        fd_check(&[a, w.clone()], |t| {
            t[0].row_softmax().mul_elem(&t[1]).unwrap().sum()
        });
    }

    #[test]
    fn fd_row_log_softmax() {
        let mut rng = Rng::new(103);
        let a = random_matrix(&mut rng, 2, 5);
        let w = random_matrix(&mut rng, 2, 5);
        fd_check(&[a, w], |t| {
            t[0].row_log_softmax().mul_elem(&t[1]).unwrap().sum()
        });
    }

    #[test]
    fn fd_layer_norm_rows() {
        let mut rng = Rng::new(104);
        let a = random_matrix(&mut rng, 3, 6);
        let w = random_matrix(&mut rng, 3, 6);
        fd_check(&[a, w], |t| {
            t[0].layer_norm_rows().mul_elem(&t[1]).unwrap().sum()
        });
    }

    #[test]
    fn fd_relu_exp_log_sigmoid() {
        let mut rng = Rng::new(105);
        let a = random_matrix(&mut rng, 2, 4);
        fd_check(std::slice::from_ref(&a), |t| t[0].relu().sum());
        fd_check(std::slice::from_ref(&a), |t| t[0].exp().sum());
        fd_check(std::slice::from_ref(&a), |t| t[0].sigmoid().sum());
        let positive = a.map(|v| v.abs() + 0.5);
        fd_check(&[positive], |t| t[0].log().sum());
    }

    #[test]
    fn fd_pool_broadcast_concat_transpose() {
        let mut rng = Rng::new(106);
        let a = random_matrix(&mut rng, 3, 4);
        let v = random_matrix(&mut rng, 1, 4);
        let w = random_matrix(&mut rng, 3, 8);
        fd_check(&[a, v, w], |t| {
            let pooled = t[0].global_avg_pool_rows();
            let expanded = t[1].broadcast_row(3).unwrap();
            let joined = t[0].concat_cols(&expanded).unwrap();
            let scored = joined.mul_elem(&t[2]).unwrap().transpose().sum();
            scored.add(&pooled.sum()).unwrap()
        });
    }

    #[test]
    fn fd_cosine_similarity_rows() {
        let mut rng = Rng::new(107);
        let a = random_matrix(&mut rng, 3, 5);
        let b = random_matrix(&mut rng, 2, 5);
        let w = random_matrix(&mut rng, 3, 2);
        fd_check(&[a, b, w], |t| {
            t[0].cosine_similarity_rows(&t[1]).unwrap().mul_elem(&t[2]).unwrap().sum()
        });
    }

    #[test]
    fn fd_row_min_max_all() {
        let mut rng = Rng::new(108);
        let a = random_matrix(&mut rng, 4, 3);
        fd_check(std::slice::from_ref(&a), |t| t[0].row_min().sum());
        fd_check(&[a], |t| t[0].max_all());
    }

    #[test]
    fn fd_mean_and_dtw() {
        let mut rng = Rng::new(109);
        let a = random_matrix(&mut rng, 3, 4).map(|v| v.abs() + 0.1);
        fd_check(std::slice::from_ref(&a), |t| t[0].mean());
        fd_check(&[a], |t| t[0].dtw_cost());
    }

    #[test]
    fn fd_slice_concat_rows_scale_by_scalar() {
        let mut rng = Rng::new(110);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 2, 3);
        let s = random_matrix(&mut rng, 1, 1);
        fd_check(&[a, b, s], |t| {
            let stacked = t[0].concat_rows(&t[1]).unwrap();
            let mid = stacked.slice_rows(1, 3).unwrap();
            mid.scale_by_scalar(&t[2]).unwrap().sum()
        });
    }

    #[test]
    fn dtw_of_zero_diagonal_is_zero() {
        let tape = Tape::new();
        let mut d = Matrix::filled(3, 3, 1.0);
        for i in 0..3 {
            d.set(i, i, 0.0);
        }
        let cost = tape.constant(d).dtw_cost().scalar_value();
        assert_eq!(cost, 0.0);
    }
}
