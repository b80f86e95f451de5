//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Every value is a
//! 2-D matrix; scalars are `1×1`. Leaves created with [`Graph::constant`] never
//! receive gradients, which keeps the cost of frozen inputs (positional grids,
//! ground truth, backbone weights) out of the backward pass.

use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-sparse constant matrix used as the right operand of [`Graph::sparse_matmul`].
#[derive(Debug, Clone)]
pub struct SparseRows {
    cols: usize,
    rows: Vec<Vec<(u32, f64)>>,
}

impl SparseRows {
    pub fn new(cols: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        debug_assert!(rows
            .iter()
            .all(|r| r.iter().all(|&(c, _)| (c as usize) < cols)));
        Self { cols, rows }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), self.cols));
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, v) in row {
                out[[i, c as usize]] += v;
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + 1ᵀ·row` with `row` of shape `1×n`.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `a ⊙ col` with `col` of shape `m×1` broadcast across columns.
    MulCol(Var, Var),
    /// Elementwise product with a constant of the same shape or a `1×n` row.
    MulConst(Var, Rc<Array2<f64>>),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Clamp01(Var),
    Row(Var, usize),
    SparseMatMul(Var, Arc<SparseRows>),
    Sum(Vec<Var>),
    /// Scalar function of `x` whose local gradient was evaluated in the forward pass.
    Scalar(Var, Array2<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const LN_EPS: f64 = 1e-5;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let max = if max.is_finite() { max } else { 0.0 };
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be 1×n");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width mismatch");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col: expected m×1 column");
        assert_eq!(self.shape(a).0, self.shape(col).0, "mul_col: height mismatch");
        let value = self.value(a) * self.value(col);
        let rg = self.rg(a) || self.rg(col);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<Array2<f64>>) -> Var {
        let (m, n) = self.shape(a);
        assert!(
            c.dim() == (m, n) || c.dim() == (1, n),
            "mul_const: constant must match or be a 1×n row"
        );
        let value = self.value(a) * &*c;
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.mean_axis(Axis(1)).expect("layer_norm on empty row");
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count mismatch");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(0.0, 1.0));
        let rg = self.rg(a);
        self.push(value, Op::Clamp01(a), rg)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let value = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Row(a, i), rg)
    }

    /// Dense `m×c` times constant row-sparse `c×p`.
    pub fn sparse_matmul(&mut self, a: Var, k: Arc<SparseRows>) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), k.nrows(), "sparse_matmul: inner dimension");
        let mut value = Array2::zeros((av.nrows(), k.ncols()));
        for (arow, mut orow) in av.rows().into_iter().zip(value.rows_mut()) {
            for (c, &w) in arow.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for &(p, kv) in k.row(c) {
                    orow[p as usize] += w * kv;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SparseMatMul(a, k), rg)
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of zero terms");
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value += self.value(p);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::Sum(parts.to_vec()), rg)
    }

    /// Records a scalar-valued function of `x` given its value and `∂f/∂x`.
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Array2<f64>) -> Var {
        assert_eq!(grad.dim(), self.shape(x), "scalar_fn: gradient shape");
        let rg = self.rg(x);
        self.push(Array2::from_elem((1, 1), value), Op::Scalar(x, grad), rg)
    }

    /// Back-propagates from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        y: &Array2<f64>,
        dy: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(dy));
                }
            }
            Op::MatMulT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, dy.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, dy * self.value(*a));
                }
            }
            Op::MulCol(a, col) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy * self.value(*col));
                }
                if self.rg(*col) {
                    let g = (dy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, g);
                }
            }
            Op::MulConst(a, c) => self.accumulate(grads, *a, dy * &**c),
            Op::Scale(a, k) => self.accumulate(grads, *a, dy * *k),
            Op::Gelu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| *g *= gelu_grad(x));
                self.accumulate(grads, *a, g);
            }
            Op::Relu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let dot = (dy * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let g = y * &(dy - &dot);
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    let g = (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, g);
                }
                if self.rg(*beta) {
                    self.accumulate(grads, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let n = xhat.ncols() as f64;
                    let dxhat = dy * self.value(*gamma);
                    let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut g = dxhat * n - sum_d - xhat * &sum_dx;
                    g *= &(inv_std / n).insert_axis(Axis(1));
                    self.accumulate(grads, *x, g);
                }
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![.., *start..*start + dy.ncols()]).assign(dy);
                self.accumulate(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        self.accumulate(grads, p, dy.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let flat: Vec<f64> = dy.iter().copied().collect();
                let g = Array2::from_shape_vec(self.shape(*a), flat).expect("reshape grad");
                self.accumulate(grads, *a, g);
            }
            Op::Clamp01(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(self.value(*a))
                    .for_each(|g, &x| {
                        if !(x > 0.0 && x < 1.0) {
                            *g = 0.0
                        }
                    });
                self.accumulate(grads, *a, g);
            }
            Op::Row(a, i) => {
                let mut g = Array2::zeros(self.shape(*a));
                g.slice_mut(s![*i..*i + 1, ..]).assign(dy);
                self.accumulate(grads, *a, g);
            }
            Op::SparseMatMul(a, k) => {
                let mut g = Array2::zeros(self.shape(*a));
                for (drow, mut grow) in dy.rows().into_iter().zip(g.rows_mut()) {
                    for (c, gv) in grow.iter_mut().enumerate() {
                        *gv = k.row(c).iter().map(|&(p, kv)| drow[p as usize] * kv).sum();
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, dy.clone());
                }
            }
            Op::Scalar(x, local) => {
                self.accumulate(grads, *x, local * dy[[0, 0]]);
            }
        }
    }
}
