//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value and the
//! operation that produced it. Nodes are appended in evaluation order, so walking the
//! tape backwards is a valid reverse topological order. Inputs created with
//! [`Tape::constant`] are never differentiated; gradient work is skipped for every node
//! that does not depend on a [`Tape::param`].
//!
//! A tape is single-use: [`Tape::backward`] consumes the recorded graph and a second
//! call returns [`Error::BackwardTwice`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction/normalization axis, numpy style: `Rows` runs over the row index
/// (one result per column), `Cols` runs over the column index (one result per row).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    AddBias(Var, Var),
    PairwiseSum(Var, Var),
    Reshape(Var),
    Exp(Var),
    Relu(Var),
    Square(Var),
    Softmax(Var, Axis),
    Sum(Var, Axis),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeError { op, detail }
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

    /// Differentiable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that is held fixed.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, src: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(src).map(f);
        let g = self.any_grad(&[src]);
        self.push(value, op, g)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", format!("inner dimensions {k} and {kb}")));
        }
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, g))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a * bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let g = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hcat(&mats);
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vcat(&mats);
        let g = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.shape(src).1 {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {}", self.shape(src).1)));
        }
        let value = self.value(src).slice_cols(start, len);
        let g = self.any_grad(&[src]);
        Ok(self.push(value, Op::SliceCols { src, start }, g))
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.shape(src).0 {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {}", self.shape(src).0)));
        }
        let value = self.value(src).slice_rows(start, len);
        let g = self.any_grad(&[src]);
        Ok(self.push(value, Op::SliceRows { src, start }, g))
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn split_cols(&mut self, src: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(src, start, w)?);
            start += w;
        }
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    /// Elementwise product with a fixed matrix (masks, decay factors).
    pub fn mul_const(&mut self, a: Var, k: Matrix) -> Result<Var> {
        if self.shape(a) != k.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", self.shape(a), k.shape())));
        }
        let value = self.value(a).zip_map(&k, |x, y| x * y);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::MulConst(a, k), g))
    }

    /// Multiplies row `i` by the fixed factor `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Vec<f64>) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if s.len() != rows {
            return Err(shape_err("scale_rows", format!("{} factors for {rows} rows", s.len())));
        }
        let src = self.value(a);
        let value = Matrix::from_fn(rows, cols, |i, j| src.get(i, j) * s[i]);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::ScaleRows(a, s), g))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if self.shape(bias) != (1, cols) {
            return Err(shape_err("add_bias", format!("bias {:?} for {cols} columns", self.shape(bias))));
        }
        let (x, b) = (self.value(a), self.value(bias));
        let value = Matrix::from_fn(rows, cols, |i, j| x.get(i, j) + b.get(0, j));
        let g = self.any_grad(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), g))
    }

    /// For `u: n×c` and `v: m×c`, row `i*m + j` of the `(n·m)×c` result is `u_i + v_j`.
    pub fn pairwise_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (n, c) = self.shape(u);
        let (m, cv) = self.shape(v);
        if c != cv {
            return Err(shape_err("pairwise_sum", format!("widths {c} and {cv}")));
        }
        let (uu, vv) = (self.value(u), self.value(v));
        let mut value = Matrix::zeros(n * m, c);
        for i in 0..n {
            let ui = uu.row(i);
            for j in 0..m {
                let vj = vv.row(j);
                for ((o, a), b) in value.row_mut(i * m + j).iter_mut().zip(ui).zip(vj) {
                    *o = a + b;
                }
            }
        }
        let g = self.any_grad(&[u, v]);
        Ok(self.push(value, Op::PairwiseSum(u, v), g))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(shape_err("reshape", format!("{r}x{c} into {rows}x{cols}")));
        }
        let value = self.value(a).clone().reshape(rows, cols);
        let g = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), g))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Softmax along `axis` (`Axis::Rows`: every column sums to one).
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let value = softmax_value(self.value(a), axis);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Softmax(a, axis), g)
    }

    /// Sum along `axis`: `Rows` gives `1×cols`, `Cols` gives `rows×1`.
    pub fn sum(&mut self, a: Var, axis: Axis) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let value = match axis {
            Axis::Rows => Matrix::from_fn(1, cols, |_, j| (0..rows).map(|i| x.get(i, j)).sum()),
            Axis::Cols => Matrix::from_fn(rows, 1, |i, _| x.row(i).iter().sum()),
        };
        let g = self.any_grad(&[a]);
        self.push(value, Op::Sum(a, axis), g)
    }

    /// Mean over all entries, as a `1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::scalar(x.sum() / x.len().max(1) as f64);
        let g = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), g)
    }

    /// Accumulates gradients of the `1×1` value `loss` into every differentiable node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite { context: format!("gradient of tape node {idx}") });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Matrix| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if nodes[a.0].needs_grad {
                    // C = op(A) op(B); dop(A) = G op(B)ᵀ.
                    let mut da = Matrix::zeros(va.rows(), va.cols());
                    if ta {
                        gemm(1.0, vb, tb, g, true, 0.0, &mut da);
                    } else {
                        gemm(1.0, g, false, vb, !tb, 0.0, &mut da);
                    }
                    acc(a, da);
                }
                if nodes[b.0].needs_grad {
                    let mut db = Matrix::zeros(vb.rows(), vb.cols());
                    if tb {
                        gemm(1.0, g, true, va, ta, 0.0, &mut db);
                    } else {
                        gemm(1.0, va, !ta, g, false, 0.0, &mut db);
                    }
                    acc(b, db);
                }
            }
            &Op::Transpose(a) => acc(a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(p, g.slice_cols(start, w));
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = nodes[p.0].value.rows();
                    acc(p, g.slice_rows(start, h));
                    start += h;
                }
            }
            &Op::SliceCols { src, start } => {
                let (rows, cols) = nodes[src.0].value.shape();
                let mut d = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    d.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(src, d);
            }
            &Op::SliceRows { src, start } => {
                let (rows, cols) = nodes[src.0].value.shape();
                let mut d = Matrix::zeros(rows, cols);
                d.as_mut_slice()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.as_slice());
                acc(src, d);
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.scaled(-1.0));
            }
            &Op::Mul(a, b) => {
                acc(a, g.zip_map(&nodes[b.0].value, |x, y| x * y));
                acc(b, g.zip_map(&nodes[a.0].value, |x, y| x * y));
            }
            Op::MulConst(a, k) => acc(*a, g.zip_map(k, |x, y| x * y)),
            Op::ScaleRows(a, s) => {
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * s[i]));
            }
            &Op::Scale(a, k) => acc(a, g.scaled(k)),
            &Op::AddBias(a, bias) => {
                acc(a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, x) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                acc(bias, db);
            }
            &Op::PairwiseSum(u, v) => {
                let n = nodes[u.0].value.rows();
                let m = nodes[v.0].value.rows();
                let c = g.cols();
                let mut du = Matrix::zeros(n, c);
                let mut dv = Matrix::zeros(m, c);
                for i in 0..n {
                    for j in 0..m {
                        let gr = g.row(i * m + j);
                        for (d, x) in du.row_mut(i).iter_mut().zip(gr) {
                            *d += x;
                        }
                        for (d, x) in dv.row_mut(j).iter_mut().zip(gr) {
                            *d += x;
                        }
                    }
                }
                acc(u, du);
                acc(v, dv);
            }
            &Op::Reshape(a) => {
                let (r, c) = nodes[a.0].value.shape();
                acc(a, g.clone().reshape(r, c));
            }
            &Op::Exp(a) => acc(a, g.zip_map(&node.value, |x, y| x * y)),
            &Op::Relu(a) => acc(a, g.zip_map(&nodes[a.0].value, |x, y| if y > 0.0 { x } else { 0.0 })),
            &Op::Square(a) => acc(a, g.zip_map(&nodes[a.0].value, |x, y| 2.0 * x * y)),
            &Op::Softmax(a, axis) => acc(a, softmax_backward(&node.value, g, axis)),
            &Op::Sum(a, axis) => {
                let (rows, cols) = nodes[a.0].value.shape();
                let d = match axis {
                    Axis::Rows => Matrix::from_fn(rows, cols, |_, j| g.get(0, j)),
                    Axis::Cols => Matrix::from_fn(rows, cols, |i, _| g.get(i, 0)),
                };
                acc(a, d);
            }
            &Op::Mean(a) => {
                let (rows, cols) = nodes[a.0].value.shape();
                acc(a, Matrix::filled(rows, cols, g.item() / (rows * cols).max(1) as f64));
            }
        }
    }
}

pub(crate) fn softmax_value(x: &Matrix, axis: Axis) -> Matrix {
    let (rows, cols) = x.shape();
    let mut out = x.clone();
    match axis {
        Axis::Cols => {
            for i in 0..rows {
                let r = out.row_mut(i);
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in r.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                r.iter_mut().for_each(|v| *v /= s);
            }
        }
        Axis::Rows => {
            for j in 0..cols {
                let m = (0..rows).map(|i| x.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..rows {
                    let e = (x.get(i, j) - m).exp();
                    out.set(i, j, e);
                    s += e;
                }
                for i in 0..rows {
                    out.set(i, j, out.get(i, j) / s);
                }
            }
        }
    }
    out
}

fn softmax_backward(y: &Matrix, g: &Matrix, axis: Axis) -> Matrix {
    let (rows, cols) = y.shape();
    let mut d = Matrix::zeros(rows, cols);
    match axis {
        Axis::Cols => {
            for i in 0..rows {
                let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                }
            }
        }
        Axis::Rows => {
            for j in 0..cols {
                let dot: f64 = (0..rows).map(|i| y.get(i, j) * g.get(i, j)).sum();
                for i in 0..rows {
                    d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                }
            }
        }
    }
    d
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

/// One sampled coordinate of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdProbe {
    pub array: String,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Step the numeric derivative was taken with.
    pub step: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FdArrayReport {
    pub array: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub arrays: Vec<FdArrayReport>,
    pub probes: Vec<FdProbe>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.arrays.iter().all(|a| a.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.arrays.iter().fold(0.0, |m, a| m.max(a.max_rel_error))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["array", "coordinate", "analytic", "numeric", "rel_error", "step"])?;
        for p in &self.probes {
            w.write_record([
                p.array.clone(),
                p.coordinate.to_string(),
                format!("{:e}", p.analytic),
                format!("{:e}", p.numeric),
                format!("{:e}", p.rel_error),
                format!("{:e}", p.step),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<fd report>", e))?;
        Ok(())
    }
}

/// Options for [`fd_check`].
#[derive(Debug, Clone)]
pub struct FdOptions {
    /// Step is `rel_step * max(1, |θ|)`.
    pub rel_step: f64,
    /// Times the step is cut tenfold when the function is not smooth within it.
    pub max_refinements: usize,
    pub tol: f64,
    /// Arrays larger than this are subsampled to exactly this many coordinates.
    pub max_coords: usize,
    /// Relative errors are taken against `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { rel_step: 1e-5, max_refinements: 3, tol: 1e-4, max_coords: 64, abs_floor: 1e-6, seed: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central differences of `f` at `params`.
///
/// Each coordinate is differenced with step `h` and `h / 2`. When the two estimates
/// disagree by more than `tol` and by more than the rounding noise of `f`, a kink (a
/// ReLU switching) lies within the step, so the step is cut tenfold and retried. A
/// coordinate that never settles (roundoff on a vanishing gradient) is scored with the
/// estimate at the first step.
///
/// `params` is restored to its original values before returning.
pub fn fd_check<F>(
    mut f: F,
    names: &[String],
    params: &mut [Matrix],
    analytic: &[Matrix],
    opts: &FdOptions,
) -> FdReport
where
    F: FnMut(&[Matrix]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    assert_eq!(params.len(), names.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut arrays = Vec::new();
    let mut probes = Vec::new();
    let scale = f(params).abs().max(1.0);
    for a in 0..params.len() {
        let n = params[a].len();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for c in coords {
            let theta = params[a].as_slice()[c];
            let mut central = |h: f64| {
                params[a].as_mut_slice()[c] = theta + h;
                let up = f(params);
                params[a].as_mut_slice()[c] = theta - h;
                let down = f(params);
                params[a].as_mut_slice()[c] = theta;
                (up - down) / (2.0 * h)
            };
            // Differences this small are rounding in the loss, not a kink.
            let noise = |h: f64| 64.0 * f64::EPSILON * scale / h;
            let settled = |x: f64, y: f64, h: f64| {
                (x - y).abs() <= (opts.tol * x.abs().max(y.abs()).max(opts.abs_floor)).max(noise(h))
            };
            let h0 = opts.rel_step * theta.abs().max(1.0);
            let first = central(h0);
            let (mut h, mut numeric) = (h0, first);
            let mut smooth = false;
            for _ in 0..=opts.max_refinements {
                if settled(numeric, central(h / 2.0), h / 2.0) {
                    smooth = true;
                    break;
                }
                h /= 10.0;
                numeric = central(h);
            }
            if !smooth {
                (h, numeric) = (h0, first);
            }
            let an = analytic[a].as_slice()[c];
            let rel = relative_error(an, numeric, opts.abs_floor);
            worst = worst.max(rel);
            probes.push(FdProbe { array: names[a].clone(), coordinate: c, analytic: an, numeric, rel_error: rel, step: h });
        }
        arrays.push(FdArrayReport { array: names[a].clone(), max_rel_error: worst, passed: worst < opts.tol });
    }
    FdReport { arrays, probes }
}
