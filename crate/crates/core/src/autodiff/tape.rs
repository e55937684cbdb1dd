use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut1, Axis};

use super::{ParamId, ParamStore, Shape, TensorError};
use crate::graph::NormalizedAdjacency;

pub type Matrix = Array2<f64>;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn shape(&self) -> Shape {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

type CustomBackward<'g> = Box<dyn Fn(&Matrix, &Matrix, &Matrix) -> Matrix + 'g>;

enum Op<'g> {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulFixed(&'g Matrix, usize),
    SparseMatMul(&'g NormalizedAdjacency, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    RowSoftmax(usize),
    RowSum(usize),
    RowMean(usize),
    Sum(usize),
    Mean(usize),
    ColumnSlice(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    L2RowNormalize(usize, Vec<f64>),
    Transpose(usize),
    GatherRows(usize, Vec<usize>),
    ClampMin(usize, f64),
    Reshape(usize),
    BlockMatMulNt(usize, usize, usize),
    BlockMatMul(usize, usize, usize),
    McSoftmaxMean {
        mu: usize,
        sigma: usize,
        noise: Array3<f64>,
    },
    GraphAttention {
        h: usize,
        att: usize,
        adj: &'g NormalizedAdjacency,
        slope: f64,
        logits: Vec<f64>,
        alpha: Vec<f64>,
    },
    Custom(usize, CustomBackward<'g>),
}

struct Node<'g> {
    value: Matrix,
    op: Op<'g>,
    requires_grad: bool,
}

/// Recording of one forward pass. `'g` bounds borrowed graph structure used by
/// sparse operations.
pub struct Tape<'g> {
    id: u64,
    nodes: Vec<Node<'g>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<(), TensorError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

fn softmax_in_place(mut row: ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    row.mapv_inplace(|v| {
        let e = (v - max).exp();
        sum += e;
        e
    });
    row.mapv_inplace(|v| v / sum);
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Monte-Carlo softmax mean for one row: `mean_t softmax(mu + sigma * eps_t)`.
fn mc_row(mu: &[f64], sigma: &[f64], eps: ArrayView2<f64>, out: &mut [f64], scratch: &mut [f64]) {
    let t_count = eps.nrows();
    out.iter_mut().for_each(|o| *o = 0.0);
    for eps_t in eps.rows() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..mu.len() {
            scratch[j] = mu[j] + sigma[j] * eps_t[j];
            max = max.max(scratch[j]);
        }
        let mut sum = 0.0;
        for s in scratch.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for j in 0..mu.len() {
            out[j] += scratch[j] / sum;
        }
    }
    let inv = 1.0 / t_count as f64;
    out.iter_mut().for_each(|o| *o *= inv);
}

#[allow(clippy::too_many_arguments)]
fn mc_row_backward(
    mu: &[f64],
    sigma: &[f64],
    eps: ArrayView2<f64>,
    g: &[f64],
    dmu: &mut [f64],
    dsigma: &mut [f64],
    scratch: &mut [f64],
) {
    let inv = 1.0 / eps.nrows() as f64;
    for eps_t in eps.rows() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..mu.len() {
            scratch[j] = mu[j] + sigma[j] * eps_t[j];
            max = max.max(scratch[j]);
        }
        let mut sum = 0.0;
        for s in scratch.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let mut dot = 0.0;
        for j in 0..mu.len() {
            scratch[j] /= sum;
            dot += g[j] * scratch[j];
        }
        for j in 0..mu.len() {
            let gs = scratch[j] * (g[j] - dot) * inv;
            dmu[j] += gs;
            dsigma[j] += gs * eps_t[j];
        }
    }
}

/// Rows of work (rows × samples × classes) before the Monte-Carlo kernel
/// splits across threads.
#[cfg(feature = "parallel")]
const MC_PAR_MIN_WORK: usize = 1 << 15;

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape == self.id && v.id < self.nodes.len() {
            Ok(v.id)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Matrix,
        op: Op<'g>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        check_finite(op_name, &value)?;
        let (rows, cols) = value.dim();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            id: self.nodes.len() - 1,
            rows,
            cols,
        })
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    /// Value of a `1×1` tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var, TensorError> {
        self.push("constant", value, Op::Constant, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Matrix) -> Result<Var, TensorError> {
        self.push("variable", value, Op::Variable, true)
    }

    /// Copies a trainable parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        self.push("param", store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if a.cols != b.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let v = self.nodes[ia].value.dot(&self.nodes[ib].value);
        let rg = self.rg(ia) || self.rg(ib);
        self.push("matmul", v, Op::MatMul(ia, ib), rg)
    }

    /// `lhs · b` where `lhs` is a borrowed constant (e.g. the feature matrix),
    /// so it is not copied onto the tape.
    pub fn matmul_fixed(&mut self, lhs: &'g Matrix, b: Var) -> Result<Var, TensorError> {
        let ib = self.check(b)?;
        if lhs.ncols() != b.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_fixed",
                left: lhs.dim(),
                right: b.shape(),
            });
        }
        let v = lhs.dot(&self.nodes[ib].value);
        let rg = self.rg(ib);
        self.push("matmul_fixed", v, Op::MatMulFixed(lhs, ib), rg)
    }

    /// `adj · x` for a sparse adjacency.
    pub fn sparse_matmul(&mut self, adj: &'g NormalizedAdjacency, x: Var) -> Result<Var, TensorError> {
        let ix = self.check(x)?;
        if adj.num_nodes() != x.rows {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_matmul",
                left: (adj.num_nodes(), adj.num_nodes()),
                right: x.shape(),
            });
        }
        let v = adj.matmul_dense(self.nodes[ix].value.view());
        let rg = self.rg(ix);
        self.push("sparse_matmul", v, Op::SparseMatMul(adj, ix), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape("add", a, b)?;
        let v = &self.nodes[ia].value + &self.nodes[ib].value;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("add", v, Op::Add(ia, ib), rg)
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        if row.rows != 1 || row.cols != a.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: a.shape(),
                right: row.shape(),
            });
        }
        let v = &self.nodes[ia].value + &self.nodes[ir].value;
        let rg = self.rg(ia) || self.rg(ir);
        self.push("add_row", v, Op::AddRow(ia, ir), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape("sub", a, b)?;
        let v = &self.nodes[ia].value - &self.nodes[ib].value;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("sub", v, Op::Sub(ia, ib), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape("mul", a, b)?;
        let v = &self.nodes[ia].value * &self.nodes[ib].value;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("mul", v, Op::Mul(ia, ib), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value * s;
        let rg = self.rg(ia);
        self.push("scale", v, Op::Scale(ia, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value + s;
        let rg = self.rg(ia);
        self.push("add_scalar", v, Op::AddScalar(ia), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.mapv(|x| x.max(0.0));
        let rg = self.rg(ia);
        self.push("relu", v, Op::Relu(ia), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(ia);
        self.push("leaky_relu", v, Op::LeakyRelu(ia, slope), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.mapv(f64::exp);
        let rg = self.rg(ia);
        self.push("exp", v, Op::Exp(ia), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        if let Some(((row, col), &value)) = self.nodes[ia].value.indexed_iter().find(|(_, &x)| x <= 0.0) {
            return Err(TensorError::NonPositiveLog { row, col, value });
        }
        let v = self.nodes[ia].value.mapv(f64::ln);
        let rg = self.rg(ia);
        self.push("log", v, Op::Log(ia), rg)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.mapv(softplus);
        let rg = self.rg(ia);
        self.push("softplus", v, Op::Softplus(ia), rg)
    }

    /// Softmax of each row, max-shifted.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let mut v = self.nodes[ia].value.clone();
        for row in v.rows_mut() {
            softmax_in_place(row);
        }
        let rg = self.rg(ia);
        self.push("row_softmax", v, Op::RowSoftmax(ia), rg)
    }

    /// Row sums as an `r×1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(ia);
        self.push("row_sum", v, Op::RowSum(ia), rg)
    }

    pub fn row_mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        if a.cols == 0 {
            return Err(TensorError::Invalid {
                op: "row_mean",
                msg: "no columns".into(),
            });
        }
        let v = self.nodes[ia].value.sum_axis(Axis(1)).insert_axis(Axis(1)) / a.cols as f64;
        let rg = self.rg(ia);
        self.push("row_mean", v, Op::RowMean(ia), rg)
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = Array2::from_elem((1, 1), self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        self.push("sum", v, Op::Sum(ia), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let n = a.rows * a.cols;
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let v = Array2::from_elem((1, 1), self.nodes[ia].value.sum() / n as f64);
        let rg = self.rg(ia);
        self.push("mean", v, Op::Mean(ia), rg)
    }

    /// Columns `start..end`.
    pub fn column_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        if start > end || end > a.cols {
            return Err(TensorError::Invalid {
                op: "column_slice",
                msg: format!("range {start}..{end} outside {} columns", a.cols),
            });
        }
        let v = self.nodes[ia].value.slice(s![.., start..end]).to_owned();
        let rg = self.rg(ia);
        self.push("column_slice", v, Op::ColumnSlice(ia, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        if let Some(bad) = parts.iter().find(|p| p.cols != first.cols) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: first.shape(),
                right: bad.shape(),
            });
        }
        let views: Vec<_> = ids.iter().map(|&i| self.nodes[i].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let rg = ids.iter().any(|&i| self.rg(i));
        self.push("concat_rows", v, Op::ConcatRows(ids), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let ids = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        if let Some(bad) = parts.iter().find(|p| p.rows != first.rows) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: first.shape(),
                right: bad.shape(),
            });
        }
        let views: Vec<_> = ids.iter().map(|&i| self.nodes[i].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let rg = ids.iter().any(|&i| self.rg(i));
        self.push("concat_cols", v, Op::ConcatCols(ids), rg)
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_row_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let mut v = self.nodes[ia].value.clone();
        let mut norms = Vec::with_capacity(a.rows);
        for (row_idx, mut row) in v.rows_mut().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm { row: row_idx });
            }
            row.mapv_inplace(|x| x / norm);
            norms.push(norm);
        }
        let rg = self.rg(ia);
        self.push("l2_row_normalize", v, Op::L2RowNormalize(ia, norms), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.t().to_owned();
        let rg = self.rg(ia);
        self.push("transpose", v, Op::Transpose(ia), rg)
    }

    /// Rows of `a` at `index`, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= a.rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {} rows", a.rows),
            });
        }
        let v = self.nodes[ia].value.select(Axis(0), index);
        let rg = self.rg(ia);
        self.push("gather_rows", v, Op::GatherRows(ia, index.to_vec()), rg)
    }

    /// `max(a, floor)`; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = self.nodes[ia].value.mapv(|x| x.max(floor));
        let rg = self.rg(ia);
        self.push("clamp_min", v, Op::ClampMin(ia, floor), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        if rows * cols != a.rows * a.cols {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: a.shape(),
                right: (rows, cols),
            });
        }
        let data: Vec<f64> = self.nodes[ia].value.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), data).expect("checked size");
        let rg = self.rg(ia);
        self.push("reshape", v, Op::Reshape(ia), rg)
    }

    fn block_count(op: &'static str, a: Var, block: usize) -> Result<usize, TensorError> {
        if block == 0 || !a.rows.is_multiple_of(block) {
            return Err(TensorError::Invalid {
                op,
                msg: format!("{} rows are not a multiple of block size {block}", a.rows),
            });
        }
        Ok(a.rows / block)
    }

    /// For each block `b` of `block` rows: `a_b · b_bᵀ`, stacked into a
    /// `(B·block) × block` matrix.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        same_shape("block_matmul_nt", a, b)?;
        let count = Self::block_count("block_matmul_nt", a, block)?;
        let mut v = Array2::zeros((a.rows, block));
        {
            let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
            for k in 0..count {
                let r = k * block..(k + 1) * block;
                let prod = av.slice(s![r.clone(), ..]).dot(&bv.slice(s![r.clone(), ..]).t());
                v.slice_mut(s![r, ..]).assign(&prod);
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        self.push("block_matmul_nt", v, Op::BlockMatMulNt(ia, ib, block), rg)
    }

    /// For each block `b`: `e_b · x_b` where `e` is `(B·block) × block`.
    pub fn block_matmul(&mut self, e: Var, x: Var, block: usize) -> Result<Var, TensorError> {
        let (ie, ix) = (self.check(e)?, self.check(x)?);
        if e.cols != block || e.rows != x.rows {
            return Err(TensorError::ShapeMismatch {
                op: "block_matmul",
                left: e.shape(),
                right: x.shape(),
            });
        }
        let count = Self::block_count("block_matmul", e, block)?;
        let mut v = Array2::zeros((x.rows, x.cols));
        {
            let (ev, xv) = (&self.nodes[ie].value, &self.nodes[ix].value);
            for k in 0..count {
                let r = k * block..(k + 1) * block;
                let prod = ev.slice(s![r.clone(), ..]).dot(&xv.slice(s![r.clone(), ..]));
                v.slice_mut(s![r, ..]).assign(&prod);
            }
        }
        let rg = self.rg(ie) || self.rg(ix);
        self.push("block_matmul", v, Op::BlockMatMul(ie, ix, block), rg)
    }

    /// Monte-Carlo mean of softmaxed Gaussian perturbations:
    /// `out[r] = mean_t softmax(mu[r] + sigma[r] ⊙ noise[r, t])`.
    ///
    /// `noise` has shape `(rows, samples, cols)` and is a constant: gradients
    /// flow to `mu` and `sigma` only.
    pub fn mc_softmax_mean(&mut self, mu: Var, sigma: Var, noise: Array3<f64>) -> Result<Var, TensorError> {
        let (im, is) = (self.check(mu)?, self.check(sigma)?);
        same_shape("mc_softmax_mean", mu, sigma)?;
        let (nr, nt, nc) = noise.dim();
        if nr != mu.rows || nc != mu.cols || nt == 0 {
            return Err(TensorError::Invalid {
                op: "mc_softmax_mean",
                msg: format!(
                    "noise shape {:?} does not fit {:?} with at least one sample",
                    noise.dim(),
                    mu.shape()
                ),
            });
        }
        let mut v = Array2::zeros(mu.shape());
        {
            let mu_v = self.nodes[im].value.as_standard_layout().into_owned();
            let sg_v = self.nodes[is].value.as_standard_layout().into_owned();
            let work = |(r, mut out): (usize, ArrayViewMut1<f64>)| {
                let mut scratch = vec![0.0; nc];
                let mut acc = vec![0.0; nc];
                mc_row(
                    mu_v.row(r).as_slice().expect("standard layout"),
                    sg_v.row(r).as_slice().expect("standard layout"),
                    noise.index_axis(Axis(0), r),
                    &mut acc,
                    &mut scratch,
                );
                out.iter_mut().zip(&acc).for_each(|(o, a)| *o = *a);
            };
            #[cfg(feature = "parallel")]
            if nr * nt * nc >= MC_PAR_MIN_WORK {
                use ndarray::parallel::prelude::*;
                v.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(work);
            } else {
                v.axis_iter_mut(Axis(0)).enumerate().for_each(work);
            }
            #[cfg(not(feature = "parallel"))]
            v.axis_iter_mut(Axis(0)).enumerate().for_each(work);
        }
        let rg = self.rg(im) || self.rg(is);
        self.push(
            "mc_softmax_mean",
            v,
            Op::McSoftmaxMean {
                mu: im,
                sigma: is,
                noise,
            },
            rg,
        )
    }

    /// Single-head graph attention over the arcs of `adj` (weights ignored;
    /// self-loops are expected to be present).
    ///
    /// With `att = [a_self; a_nbr]` (`2c × 1`): logits
    /// `e_uv = leaky_relu(h_u·a_self + h_v·a_nbr)`, `alpha_u = softmax_v(e_u·)`,
    /// `out_u = Σ_v alpha_uv h_v`.
    pub fn graph_attention(
        &mut self,
        h: Var,
        att: Var,
        adj: &'g NormalizedAdjacency,
        slope: f64,
    ) -> Result<Var, TensorError> {
        let (ih, ia) = (self.check(h)?, self.check(att)?);
        if att.shape() != (2 * h.cols, 1) || adj.num_nodes() != h.rows {
            return Err(TensorError::ShapeMismatch {
                op: "graph_attention",
                left: h.shape(),
                right: att.shape(),
            });
        }
        let c = h.cols;
        let (out, logits, alpha) = {
            let hv = &self.nodes[ih].value;
            let av = &self.nodes[ia].value;
            let a_self = av.slice(s![..c, 0]);
            let a_nbr = av.slice(s![c.., 0]);
            let src: ndarray::Array1<f64> = hv.dot(&a_self);
            let dst: ndarray::Array1<f64> = hv.dot(&a_nbr);
            let mut logits = vec![0.0; adj.num_arcs()];
            let mut alpha = vec![0.0; adj.num_arcs()];
            let mut out = Array2::zeros(h.shape());
            let offs = adj.row_offsets();
            let cols = adj.col_indices();
            for u in 0..h.rows {
                let r = offs[u]..offs[u + 1];
                if r.is_empty() {
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for a in r.clone() {
                    let z = src[u] + dst[cols[a]];
                    logits[a] = z;
                    let e = if z > 0.0 { z } else { slope * z };
                    alpha[a] = e;
                    max = max.max(e);
                }
                let mut sum = 0.0;
                for a in r.clone() {
                    alpha[a] = (alpha[a] - max).exp();
                    sum += alpha[a];
                }
                let mut row = out.row_mut(u);
                for a in r {
                    alpha[a] /= sum;
                    row.scaled_add(alpha[a], &hv.row(cols[a]));
                }
            }
            (out, logits, alpha)
        };
        let rg = self.rg(ih) || self.rg(ia);
        self.push(
            "graph_attention",
            out,
            Op::GraphAttention {
                h: ih,
                att: ia,
                adj,
                slope,
                logits,
                alpha,
            },
            rg,
        )
    }

    /// Per-arc attention coefficients of a [`Tape::graph_attention`] output,
    /// aligned with the adjacency's CSR arc order.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[self.check(v).ok()?].op {
            Op::GraphAttention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// Unary op with caller-supplied forward value and backward rule
    /// `backward(input, output, upstream) -> input gradient`.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(&Matrix) -> Matrix,
        backward: impl Fn(&Matrix, &Matrix, &Matrix) -> Matrix + 'g,
    ) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = forward(&self.nodes[ia].value);
        let rg = self.rg(ia);
        self.push("custom", v, Op::Custom(ia, Box::new(backward)), rg)
    }

    /// Reverse pass from a `1×1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let il = self.check(loss)?;
        if loss.shape() != (1, 1) {
            return Err(TensorError::NotScalar(loss.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Array2::ones((1, 1)));

        for id in (0..=il).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Constant | Op::Variable | Op::Param(_)) {
                // leaves keep their gradient
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |target: usize, delta: Matrix| {
                if !self.nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Constant | Op::Variable | Op::Param(_) => unreachable!("handled above"),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.dot(&val(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(*b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulFixed(lhs, b) => acc(*b, lhs.t().dot(&g)),
                Op::SparseMatMul(adj, x) => acc(*x, adj.transpose_matmul_dense(g.view())),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, -&g);
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, &g * val(*b));
                    }
                    if self.rg(*b) {
                        acc(*b, &g * val(*a));
                    }
                }
                Op::Scale(a, s) => acc(*a, g * *s),
                Op::AddScalar(a) => acc(*a, g),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, g * &node.value),
                Op::Log(a) => acc(*a, g / val(*a)),
                Op::Softplus(a) => acc(*a, g * &val(*a).mapv(sigmoid)),
                Op::RowSoftmax(a) => {
                    let p = &node.value;
                    let dot = (&g * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*a, p * &(g - &dot));
                }
                Op::RowSum(a) => {
                    let d = g.broadcast(val(*a).dim()).expect("column broadcast").to_owned();
                    acc(*a, d);
                }
                Op::RowMean(a) => {
                    let cols = val(*a).ncols() as f64;
                    let d = g.broadcast(val(*a).dim()).expect("column broadcast").to_owned() / cols;
                    acc(*a, d);
                }
                Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
                }
                Op::ColumnSlice(a, start) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, d);
                }
                Op::ConcatRows(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let r = val(i).nrows();
                        acc(i, g.slice(s![off..off + r, ..]).to_owned());
                        off += r;
                    }
                }
                Op::ConcatCols(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let c = val(i).ncols();
                        acc(i, g.slice(s![.., off..off + c]).to_owned());
                        off += c;
                    }
                }
                Op::L2RowNormalize(a, norms) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        let dot = g.row(r).dot(&y.row(r));
                        row.scaled_add(-dot, &y.row(r));
                        row.mapv_inplace(|x| x / norms[r]);
                    }
                    acc(*a, d);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::GatherRows(a, index) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (k, &i) in index.iter().enumerate() {
                        d.row_mut(i).scaled_add(1.0, &g.row(k));
                    }
                    acc(*a, d);
                }
                Op::ClampMin(a, floor) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, &x| {
                        if x <= *floor {
                            *d = 0.0
                        }
                    });
                    acc(*a, d);
                }
                Op::Reshape(a) => {
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(*a, Array2::from_shape_vec(val(*a).dim(), data).expect("same size"));
                }
                Op::BlockMatMulNt(a, b, block) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(bv.dim());
                    for k in 0..av.nrows() / block {
                        let r = k * block..(k + 1) * block;
                        let gk = g.slice(s![r.clone(), ..]);
                        da.slice_mut(s![r.clone(), ..])
                            .assign(&gk.dot(&bv.slice(s![r.clone(), ..])));
                        db.slice_mut(s![r.clone(), ..])
                            .assign(&gk.t().dot(&av.slice(s![r, ..])));
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::BlockMatMul(e, x, block) => {
                    let (ev, xv) = (val(*e), val(*x));
                    let mut de = Array2::zeros(ev.dim());
                    let mut dx = Array2::zeros(xv.dim());
                    for k in 0..ev.nrows() / block {
                        let r = k * block..(k + 1) * block;
                        let gk = g.slice(s![r.clone(), ..]);
                        de.slice_mut(s![r.clone(), ..])
                            .assign(&gk.dot(&xv.slice(s![r.clone(), ..]).t()));
                        dx.slice_mut(s![r.clone(), ..])
                            .assign(&ev.slice(s![r, ..]).t().dot(&gk));
                    }
                    acc(*e, de);
                    acc(*x, dx);
                }
                Op::McSoftmaxMean { mu, sigma, noise } => {
                    let mu_v = val(*mu).as_standard_layout().into_owned();
                    let sg_v = val(*sigma).as_standard_layout().into_owned();
                    let g = g.as_standard_layout().into_owned();
                    let nc = mu_v.ncols();
                    let mut dmu = Array2::zeros(mu_v.dim());
                    let mut dsg = Array2::zeros(mu_v.dim());
                    let row_grad = |r: usize, dm: &mut [f64], ds: &mut [f64]| {
                        let mut scratch = vec![0.0; nc];
                        mc_row_backward(
                            mu_v.row(r).as_slice().expect("standard layout"),
                            sg_v.row(r).as_slice().expect("standard layout"),
                            noise.index_axis(Axis(0), r),
                            g.row(r).as_slice().expect("standard layout"),
                            dm,
                            ds,
                            &mut scratch,
                        );
                    };
                    #[cfg(feature = "parallel")]
                    {
                        use ndarray::parallel::prelude::*;
                        dmu.axis_iter_mut(Axis(0))
                            .into_par_iter()
                            .zip(dsg.axis_iter_mut(Axis(0)))
                            .enumerate()
                            .for_each(|(r, (mut dm, mut ds))| {
                                row_grad(r, dm.as_slice_mut().unwrap(), ds.as_slice_mut().unwrap())
                            });
                    }
                    #[cfg(not(feature = "parallel"))]
                    for (r, (mut dm, mut ds)) in dmu.rows_mut().into_iter().zip(dsg.rows_mut()).enumerate() {
                        row_grad(r, dm.as_slice_mut().unwrap(), ds.as_slice_mut().unwrap());
                    }
                    acc(*mu, dmu);
                    acc(*sigma, dsg);
                }
                Op::GraphAttention {
                    h,
                    att,
                    adj,
                    slope,
                    logits,
                    alpha,
                } => {
                    let hv = val(*h);
                    let av = val(*att);
                    let c = hv.ncols();
                    let a_self = av.slice(s![..c, 0]);
                    let a_nbr = av.slice(s![c.., 0]);
                    let offs = adj.row_offsets();
                    let cols = adj.col_indices();
                    let n = hv.nrows();
                    let mut dh = Array2::zeros(hv.dim());
                    let mut dsrc = vec![0.0; n];
                    let mut ddst = vec![0.0; n];
                    let mut dalpha = Vec::new();
                    for u in 0..n {
                        let r = offs[u]..offs[u + 1];
                        let gu = g.row(u);
                        dalpha.clear();
                        let mut weighted = 0.0;
                        for a in r.clone() {
                            let v = cols[a];
                            let da = gu.dot(&hv.row(v));
                            dalpha.push(da);
                            weighted += alpha[a] * da;
                            dh.row_mut(v).scaled_add(alpha[a], &gu);
                        }
                        for (k, a) in r.enumerate() {
                            let de = alpha[a] * (dalpha[k] - weighted);
                            let dz = if logits[a] > 0.0 { de } else { de * slope };
                            dsrc[u] += dz;
                            ddst[cols[a]] += dz;
                        }
                    }
                    let mut datt = Array2::zeros(av.dim());
                    for u in 0..n {
                        dh.row_mut(u).scaled_add(dsrc[u], &a_self);
                        dh.row_mut(u).scaled_add(ddst[u], &a_nbr);
                        datt.slice_mut(s![..c, 0]).scaled_add(dsrc[u], &hv.row(u));
                        datt.slice_mut(s![c.., 0]).scaled_add(ddst[u], &hv.row(u));
                    }
                    acc(*h, dh);
                    acc(*att, datt);
                }
                Op::Custom(a, backward) => acc(*a, backward(val(*a), &node.value, &g)),
            }
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params: leaves,
        })
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of a variable or parameter leaf; `None` when unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// One gradient per parameter in `store` order; parameters that were not
    /// reached (or not placed on the tape) get zeros. Copies of the same
    /// parameter are summed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect();
        for &(p, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[p.index()] += g;
            }
        }
        out
    }
}
