//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation stores its
//! forward value and, when any input requires gradients, an op record with
//! the input node ids. [`Tape::backward`] consumes the tape and walks the
//! arena in reverse id order (which is a topological order by
//! construction), accumulating adjoints.
//!
//! A tape is single-threaded and owned by one training step; independent
//! tapes may run on different threads. Ops panic on shape mismatch.

use std::cell::RefCell;

use crate::manifold::Manifold;
use crate::rng::Prng;
use crate::tensor::Matrix;
use crate::Result;
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Input node, or an op whose inputs all had `requires_grad == false`.
    Leaf,
    MatMul(usize, usize),
    /// `A * B^T`.
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Softplus(usize),
    RowNormalize(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    MeanPool(usize),
    SumAll(usize),
    RowSum(usize),
    RowScale(usize, usize),
    RowDiv(usize, usize),
    RowsSelect(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    StackRows(Vec<usize>),
    MaskDiag(usize),
    SelectEntries(usize, Vec<usize>),
    Reshape(usize),
    AddRowBroadcast(usize, usize),
    ExpMap0(usize, f64),
    LogMap0(usize, f64),
    CapRowNorm(usize, f64),
}

struct Node {
    value: Matrix,
    requires_grad: bool,
    op: Op,
}

/// Reverse-accumulation tape.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every grad-requiring node of a consumed tape.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `var`; exact zeros if the loss did not depend on it.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.id];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Matrix {
        match self.grads[var.id].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Ops whose inputs are all constant need no backward record.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, requires_grad, op });
        Var { id }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Register an input node.
    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Register a constant (no gradient flows into it).
    pub fn constant(&self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Clone of the forward value at `var`.
    pub fn value(&self, var: Var) -> Matrix {
        self.nodes.borrow()[var.id].value.clone()
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes.borrow()[var.id].value.shape()
    }

    /// `A * B`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul(&nodes[b.id].value)
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::MatMul(a.id, b.id))
    }

    /// `A * B^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].value.matmul_nt(&nodes[b.id].value)
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::MatMulNt(a.id, b.id))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(x.shape(), y.shape(), "add shape mismatch");
            let mut out = x.clone();
            out.add_assign(y);
            out
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
            let mut out = x.clone();
            for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                *o -= v;
            }
            out
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::Sub(a.id, b.id))
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
            let mut out = x.clone();
            for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                *o *= v;
            }
            out
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::Mul(a.id, b.id))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.nodes.borrow()[a.id].value.map(|x| c * x);
        self.push(out, self.rg(a.id), Op::Scale(a.id, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.nodes.borrow()[a.id].value.map(|x| x + c);
        self.push(out, self.rg(a.id), Op::AddScalar(a.id))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.id].value.map(|x| x.max(0.0));
        self.push(out, self.rg(a.id), Op::Relu(a.id))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.id].value.map(f64::tanh);
        self.push(out, self.rg(a.id), Op::Tanh(a.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.id].value.map(|x| {
            if x > 30.0 {
                x
            } else if x < -30.0 {
                x.exp()
            } else {
                x.exp().ln_1p()
            }
        });
        self.push(out, self.rg(a.id), Op::Softplus(a.id))
    }

    /// L2-normalize each row; rows with norm below `1e-12` pass through
    /// scaled by `1/1e-12` of themselves (i.e. zeros stay zeros).
    pub fn row_normalize(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = x.clone();
            for r in 0..x.rows() {
                let norm = crate::tensor::l2_norm(x.row(r)).max(1e-12);
                for v in out.row_mut(r) {
                    *v /= norm;
                }
            }
            out
        };
        self.push(out, self.rg(a.id), Op::RowNormalize(a.id))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            softmax_rows_value(&nodes[a.id].value)
        };
        self.push(out, self.rg(a.id), Op::SoftmaxRows(a.id))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = x.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                    *o = v - lse;
                }
            }
            out
        };
        self.push(out, self.rg(a.id), Op::LogSoftmaxRows(a.id))
    }

    /// Mean over rows: `[n x d] -> [1 x d]`.
    pub fn mean_pool(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            assert!(x.rows() >= 1, "mean_pool of empty matrix");
            let mut out = Matrix::zeros(1, x.cols());
            for r in 0..x.rows() {
                for (o, v) in out.row_mut(0).iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            out.scale_assign(1.0 / x.rows() as f64);
            out
        };
        self.push(out, self.rg(a.id), Op::MeanPool(a.id))
    }

    /// Sum of all entries: `[n x d] -> [1 x 1]`.
    pub fn sum_all(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            Matrix::from_vec(1, 1, vec![nodes[a.id].value.data().iter().sum()])
        };
        self.push(out, self.rg(a.id), Op::SumAll(a.id))
    }

    /// Per-row sum: `[n x d] -> [n x 1]`.
    pub fn row_sum(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let sums: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            Matrix::col_vector(&sums)
        };
        self.push(out, self.rg(a.id), Op::RowSum(a.id))
    }

    /// Multiply row `i` of `a` by scalar `s[i, 0]`.
    pub fn row_scale(&self, a: Var, s: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, sc) = (&nodes[a.id].value, &nodes[s.id].value);
            assert_eq!(sc.shape(), (x.rows(), 1), "row_scale needs an [n x 1] scale");
            let mut out = x.clone();
            for r in 0..x.rows() {
                let f = sc.get(r, 0);
                for v in out.row_mut(r) {
                    *v *= f;
                }
            }
            out
        };
        self.push(out, self.rg(a.id) || self.rg(s.id), Op::RowScale(a.id, s.id))
    }

    /// Divide row `i` of `a` by scalar `s[i, 0]`.
    pub fn row_div(&self, a: Var, s: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, sc) = (&nodes[a.id].value, &nodes[s.id].value);
            assert_eq!(sc.shape(), (x.rows(), 1), "row_div needs an [n x 1] divisor");
            let mut out = x.clone();
            for r in 0..x.rows() {
                let f = sc.get(r, 0);
                for v in out.row_mut(r) {
                    *v /= f;
                }
            }
            out
        };
        self.push(out, self.rg(a.id) || self.rg(s.id), Op::RowDiv(a.id, s.id))
    }

    /// Gather rows: `out[k] = a[idx[k]]`.
    pub fn rows_select(&self, a: Var, idx: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = Matrix::zeros(idx.len(), x.cols());
            for (k, &i) in idx.iter().enumerate() {
                assert!(i < x.rows(), "rows_select index {i} out of range");
                out.row_mut(k).copy_from_slice(x.row(i));
            }
            out
        };
        self.push(out, self.rg(a.id), Op::RowsSelect(a.id, idx.to_vec()))
    }

    /// Scatter-add rows of `a` into an `[n x d]` output: `out[idx[k]] += a[k]`.
    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], n: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            assert_eq!(x.rows(), idx.len(), "scatter_add_rows index length mismatch");
            let mut out = Matrix::zeros(n, x.cols());
            for (k, &i) in idx.iter().enumerate() {
                assert!(i < n, "scatter_add_rows target {i} out of range");
                for (o, v) in out.row_mut(i).iter_mut().zip(x.row(k)) {
                    *o += v;
                }
            }
            out
        };
        self.push(out, self.rg(a.id), Op::ScatterAddRows(a.id, idx.to_vec()))
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(x.cols(), y.cols(), "concat_rows column mismatch");
            let mut data = Vec::with_capacity(x.len() + y.len());
            data.extend_from_slice(x.data());
            data.extend_from_slice(y.data());
            Matrix::from_vec(x.rows() + y.rows(), x.cols(), data)
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::ConcatRows(a.id, b.id))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(x.rows(), y.rows(), "concat_cols row mismatch");
            let mut out = Matrix::zeros(x.rows(), x.cols() + y.cols());
            for r in 0..x.rows() {
                out.row_mut(r)[..x.cols()].copy_from_slice(x.row(r));
                out.row_mut(r)[x.cols()..].copy_from_slice(y.row(r));
            }
            out
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::ConcatCols(a.id, b.id))
    }

    /// Stack several blocks of rows (n-ary `concat_rows`).
    pub fn stack_rows(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "stack_rows of nothing");
        let (out, rg) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[vars[0].id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            let mut rg = false;
            for v in vars {
                let m = &nodes[v.id].value;
                assert_eq!(m.cols(), cols, "stack_rows column mismatch");
                data.extend_from_slice(m.data());
                rows += m.rows();
                rg |= nodes[v.id].requires_grad;
            }
            (Matrix::from_vec(rows, cols, data), rg)
        };
        self.push(out, rg, Op::StackRows(vars.iter().map(|v| v.id).collect()))
    }

    /// Replace the diagonal of a square matrix with constant `c`.
    pub fn mask_diag(&self, a: Var, c: f64) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            assert_eq!(x.rows(), x.cols(), "mask_diag needs a square matrix");
            let mut out = x.clone();
            for i in 0..x.rows() {
                out.set(i, i, c);
            }
            out
        };
        self.push(out, self.rg(a.id), Op::MaskDiag(a.id))
    }

    /// Per-row entry pick: `out[i, 0] = a[i, cols[i]]`.
    pub fn select_entries(&self, a: Var, cols: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            assert_eq!(x.rows(), cols.len(), "select_entries length mismatch");
            let vals: Vec<f64> = cols
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    assert!(c < x.cols(), "select_entries column {c} out of range");
                    x.get(i, c)
                })
                .collect();
            Matrix::col_vector(&vals)
        };
        self.push(out, self.rg(a.id), Op::SelectEntries(a.id, cols.to_vec()))
    }

    /// Row-major reshape (element count must match).
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            assert_eq!(x.len(), rows * cols, "reshape element count mismatch");
            Matrix::from_vec(rows, cols, x.data().to_vec())
        };
        self.push(out, self.rg(a.id), Op::Reshape(a.id))
    }

    /// Broadcast-add a `[1 x d]` row to every row of `a`.
    pub fn add_row_broadcast(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            assert_eq!(y.shape(), (1, x.cols()), "add_row_broadcast needs [1 x d]");
            let mut out = x.clone();
            for r in 0..x.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(y.row(0)) {
                    *o += v;
                }
            }
            out
        };
        self.push(out, self.rg(a.id) || self.rg(b.id), Op::AddRowBroadcast(a.id, b.id))
    }

    /// Rowwise exponential map at the origin of the curvature-`kappa` chart.
    pub fn exp_map0(&self, a: Var, kappa: f64) -> Result<Var> {
        let man = Manifold::new(kappa);
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = x.clone();
            for r in 0..x.rows() {
                let mapped = man.exp0(x.row(r))?;
                out.row_mut(r).copy_from_slice(&mapped);
            }
            out
        };
        Ok(self.push(out, self.rg(a.id), Op::ExpMap0(a.id, kappa)))
    }

    /// Rowwise logarithmic map at the origin.
    pub fn log_map0(&self, a: Var, kappa: f64) -> Result<Var> {
        let man = Manifold::new(kappa);
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = x.clone();
            for r in 0..x.rows() {
                let mapped = man.log0(x.row(r))?;
                out.row_mut(r).copy_from_slice(&mapped);
            }
            out
        };
        Ok(self.push(out, self.rg(a.id), Op::LogMap0(a.id, kappa)))
    }

    /// Rescale any row whose norm exceeds `c` back to norm `c`.
    pub fn cap_row_norm(&self, a: Var, c: f64) -> Var {
        assert!(c > 0.0, "cap_row_norm needs a positive cap");
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let mut out = x.clone();
            for r in 0..x.rows() {
                let norm = crate::tensor::l2_norm(x.row(r));
                if norm > c {
                    let f = c / norm;
                    for v in out.row_mut(r) {
                        *v *= f;
                    }
                }
            }
            out
        };
        self.push(out, self.rg(a.id), Op::CapRowNorm(a.id, c))
    }

    /// Inverted dropout. In training mode each entry is kept with
    /// probability `1 - rate` and scaled by `1/(1 - rate)`; in eval mode
    /// the input passes through unchanged.
    pub fn dropout(&self, a: Var, rate: f64, training: bool, rng: &mut Prng) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if !training || rate == 0.0 {
            return a;
        }
        let (rows, cols) = self.shape(a);
        let keep = 1.0 - rate;
        let mask = Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse pass from a `1 x 1` loss node. Consumes the tape.
    pub fn backward(self, loss: Var) -> Gradients {
        let nodes = self.nodes.into_inner();
        assert_eq!(
            nodes[loss.id].value.shape(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let shapes: Vec<(usize, usize)> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[id].requires_grad {
                continue;
            }
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                op => {
                    backprop(op, &g, &nodes, &mut grads);
                }
            }
        }

        Gradients { grads, shapes }
    }
}

/// Numerically stable row softmax on a plain matrix.
pub(crate) fn softmax_rows_value(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.row_mut(r) {
            *o /= sum;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Matrix>], nodes: &[Node], id: usize, delta: Matrix) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop(op: &Op, g: &Matrix, nodes: &[Node], grads: &mut [Option<Matrix>]) {
    let value = |id: usize| -> &Matrix { &nodes[id].value };
    match op {
        Op::Leaf => unreachable!("leaves handled by caller"),
        Op::MatMul(a, b) => {
            accumulate(grads, nodes, *a, g.matmul_nt(value(*b)));
            accumulate(grads, nodes, *b, value(*a).transpose().matmul(g));
        }
        Op::MatMulNt(a, b) => {
            // out = A B^T: dA = G B, dB = G^T A
            accumulate(grads, nodes, *a, g.matmul(value(*b)));
            accumulate(grads, nodes, *b, g.transpose().matmul(value(*a)));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (x, y) = (value(*a), value(*b));
            let mut da = g.clone();
            for (d, v) in da.data_mut().iter_mut().zip(y.data()) {
                *d *= v;
            }
            let mut db = g.clone();
            for (d, v) in db.data_mut().iter_mut().zip(x.data()) {
                *d *= v;
            }
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, g.map(|x| c * x));
        }
        Op::AddScalar(a) => {
            accumulate(grads, nodes, *a, g.clone());
        }
        Op::Relu(a) => {
            let x = value(*a);
            let mut da = g.clone();
            for (d, v) in da.data_mut().iter_mut().zip(x.data()) {
                if *v <= 0.0 {
                    *d = 0.0;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Tanh(a) => {
            let x = value(*a);
            let mut da = g.clone();
            for (d, v) in da.data_mut().iter_mut().zip(x.data()) {
                let y = v.tanh();
                *d *= 1.0 - y * y;
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Softplus(a) => {
            let x = value(*a);
            let mut da = g.clone();
            for (d, v) in da.data_mut().iter_mut().zip(x.data()) {
                *d *= 1.0 / (1.0 + (-v).exp());
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::RowNormalize(a) => {
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let row = x.row(r);
                let norm = crate::tensor::l2_norm(row).max(1e-12);
                let gv = crate::tensor::dot(g.row(r), row);
                let n3 = norm * norm * norm;
                for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                    *d = g.row(r)[j] / norm - gv * row[j] / n3;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::SoftmaxRows(a) => {
            let y = softmax_rows_value(value(*a));
            let mut da = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let gy = crate::tensor::dot(g.row(r), y.row(r));
                for j in 0..y.cols() {
                    da.set(r, j, y.get(r, j) * (g.get(r, j) - gy));
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::LogSoftmaxRows(a) => {
            let p = softmax_rows_value(value(*a));
            let mut da = Matrix::zeros(p.rows(), p.cols());
            for r in 0..p.rows() {
                let gsum: f64 = g.row(r).iter().sum();
                for j in 0..p.cols() {
                    da.set(r, j, g.get(r, j) - p.get(r, j) * gsum);
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::MeanPool(a) => {
            let x = value(*a);
            let f = 1.0 / x.rows() as f64;
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                for (d, v) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                    *d = v * f;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::SumAll(a) => {
            let x = value(*a);
            accumulate(grads, nodes, *a, Matrix::filled(x.rows(), x.cols(), g.scalar()));
        }
        Op::RowSum(a) => {
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let gr = g.get(r, 0);
                for d in da.row_mut(r) {
                    *d = gr;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::RowScale(a, s) => {
            let (x, sc) = (value(*a), value(*s));
            let mut da = g.clone();
            let mut ds = Matrix::zeros(x.rows(), 1);
            for r in 0..x.rows() {
                let f = sc.get(r, 0);
                let mut acc = 0.0;
                for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                    acc += g.get(r, j) * x.get(r, j);
                    *d *= f;
                }
                ds.set(r, 0, acc);
            }
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *s, ds);
        }
        Op::RowDiv(a, s) => {
            let (x, sc) = (value(*a), value(*s));
            let mut da = g.clone();
            let mut ds = Matrix::zeros(x.rows(), 1);
            for r in 0..x.rows() {
                let f = sc.get(r, 0);
                let mut acc = 0.0;
                for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                    acc += g.get(r, j) * x.get(r, j);
                    *d /= f;
                }
                ds.set(r, 0, -acc / (f * f));
            }
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *s, ds);
        }
        Op::RowsSelect(a, idx) => {
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for (k, &i) in idx.iter().enumerate() {
                for (d, v) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::ScatterAddRows(a, idx) => {
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for (k, &i) in idx.iter().enumerate() {
                da.row_mut(k).copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::ConcatRows(a, b) => {
            let (x, y) = (value(*a), value(*b));
            let mut da = Matrix::zeros(x.rows(), x.cols());
            let mut db = Matrix::zeros(y.rows(), y.cols());
            for r in 0..x.rows() {
                da.row_mut(r).copy_from_slice(g.row(r));
            }
            for r in 0..y.rows() {
                db.row_mut(r).copy_from_slice(g.row(x.rows() + r));
            }
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::ConcatCols(a, b) => {
            let (x, y) = (value(*a), value(*b));
            let mut da = Matrix::zeros(x.rows(), x.cols());
            let mut db = Matrix::zeros(y.rows(), y.cols());
            for r in 0..x.rows() {
                da.row_mut(r).copy_from_slice(&g.row(r)[..x.cols()]);
                db.row_mut(r).copy_from_slice(&g.row(r)[x.cols()..]);
            }
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::StackRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let x = value(id);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    dx.row_mut(r).copy_from_slice(g.row(offset + r));
                }
                offset += x.rows();
                accumulate(grads, nodes, id, dx);
            }
        }
        Op::MaskDiag(a) => {
            let mut da = g.clone();
            for i in 0..da.rows() {
                da.set(i, i, 0.0);
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::SelectEntries(a, cols) => {
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for (i, &c) in cols.iter().enumerate() {
                da.set(i, c, g.get(i, 0));
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Reshape(a) => {
            let x = value(*a);
            accumulate(
                grads,
                nodes,
                *a,
                Matrix::from_vec(x.rows(), x.cols(), g.data().to_vec()),
            );
        }
        Op::AddRowBroadcast(a, b) => {
            let y = value(*b);
            let mut db = Matrix::zeros(1, y.cols());
            for r in 0..g.rows() {
                for (d, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, db);
        }
        Op::ExpMap0(a, kappa) => {
            let man = Manifold::new(*kappa);
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let dv = man.exp0_backward(x.row(r), g.row(r));
                da.row_mut(r).copy_from_slice(&dv);
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::LogMap0(a, kappa) => {
            let man = Manifold::new(*kappa);
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let dv = man.log0_backward(x.row(r), g.row(r));
                da.row_mut(r).copy_from_slice(&dv);
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::CapRowNorm(a, c) => {
            let x = value(*a);
            let mut da = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let row = x.row(r);
                let norm = crate::tensor::l2_norm(row);
                if norm <= *c {
                    da.row_mut(r).copy_from_slice(g.row(r));
                } else {
                    // out = c v / ||v||: same Jacobian as normalize, scaled by c.
                    let gv = crate::tensor::dot(g.row(r), row);
                    let n3 = norm * norm * norm;
                    for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = c * (g.row(r)[j] / norm - gv * row[j] / n3);
                    }
                }
            }
            accumulate(grads, nodes, *a, da);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // f(W) = sum(W v) => dW = 1 v^T
        let tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true);
        let v = tape.constant(Matrix::col_vector(&[0.5, -1.0]));
        let loss = tape.sum_all(tape.matmul(w, v));
        let grads = tape.backward(loss);
        let gw = grads.get(w);
        assert_eq!(gw, Matrix::from_rows(&[vec![0.5, -1.0], vec![0.5, -1.0]]));
    }

    #[test]
    fn relu_gradient_is_sign_mask() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[1.0, -1.0]), true);
        let loss = tape.sum_all(tape.relu(x));
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).data(), &[1.0, 0.0]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(&[2.0]), true);
        let y = tape.leaf(Matrix::row_vector(&[3.0]), true);
        let loss = tape.sum_all(tape.scale(x, 2.0));
        let grads = tape.backward(loss);
        assert_eq!(grads.get(y).data(), &[0.0]);
    }

    #[test]
    fn softmax_rows_uniform_on_equal_logits() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[0.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn row_normalize_three_four_five() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[3.0, 4.0]));
        let y = tape.row_normalize(x);
        let v = tape.value(y);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((v.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "add shape mismatch")]
    fn add_panics_on_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 2));
        let b = tape.constant(Matrix::zeros(2, 3));
        let _ = tape.add(a, b);
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar loss")]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2), true);
        let y = tape.relu(x);
        let _ = tape.backward(y);
    }
}
