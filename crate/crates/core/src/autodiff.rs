//! Minimal reverse-mode differentiation over dense 2-D `f64` matrices.
//!
//! A [`Tape`] records operations eagerly: every push computes the node's
//! value immediately, so recording *is* the forward pass. The tape can be
//! replayed with new leaf bindings through [`Tape::forward`], which is what
//! [`grad_check`] and the determinism tests rely on.
//!
//! Binary element-wise operations broadcast row vectors `(1, c)`, column
//! vectors `(r, 1)` and scalars `(1, 1)` against full matrices. Gradients are
//! summed back over the broadcast axes.

use nalgebra::DMatrix;
use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceAxis {
    /// Reduce each column to a single row: `(r, c) -> (1, c)`.
    Rows,
    /// Reduce each row to a single column: `(r, c) -> (r, 1)`.
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MaxAxis(Var, ReduceAxis),
    Maximum(Var, Var),
    StopGradient(Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    SoftmaxRows(Var),
    LinearFixedPoint(Var, Var),
    HyperMlp(HyperMlp),
}

/// A ReLU network per row of `omegas`, all applied to the same input.
#[derive(Clone, Debug)]
struct HyperMlp {
    x: Var,
    omegas: Var,
    /// `(inputs, outputs)` per layer. Row `b` of `omegas` stores, layer by
    /// layer, a row-major weight matrix followed by its biases.
    layers: Vec<(usize, usize)>,
}

impl HyperMlp {
    fn n_params(&self) -> usize {
        self.layers.iter().map(|(i, o)| i * o + o).sum()
    }

    fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.1)
    }

    /// Weight matrix and bias of every layer of row `b`.
    fn weights<'a>(&self, omegas: &'a Matrix, b: usize) -> Vec<Layer<'a>> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|&(i, o)| {
                let w = omegas
                    .row(b)
                    .slice_move(s![offset..offset + i * o])
                    .into_shape_with_order((i, o))
                    .expect("contiguous row");
                let bias = omegas
                    .row(b)
                    .slice_move(s![offset + i * o..offset + i * o + o]);
                offset += i * o + o;
                (w, bias)
            })
            .collect()
    }

    /// Activations of every layer for one row; the last one is linear.
    fn activations(&self, x: &Matrix, weights: &[Layer]) -> Vec<Matrix> {
        let mut acts: Vec<Matrix> = Vec::with_capacity(weights.len());
        for (l, (w, bias)) in weights.iter().enumerate() {
            let input = if l == 0 { x } else { &acts[l - 1] };
            let mut h = input.dot(w);
            let bias = bias.as_slice().expect("contiguous row");
            let relu = l + 1 < weights.len();
            for mut row in h.rows_mut() {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if relu && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(h);
        }
        acts
    }

    /// Output blocks, plus the hidden activations when `keep` is set.
    fn forward(&self, x: &Matrix, omegas: &Matrix, keep: bool) -> (Matrix, Aux) {
        let o = self.outputs();
        let mut out = Array2::zeros((x.nrows(), omegas.nrows() * o));
        let mut hidden = Vec::with_capacity(if keep { omegas.nrows() } else { 0 });
        for b in 0..omegas.nrows() {
            let mut acts = self.activations(x, &self.weights(omegas, b));
            out.slice_mut(s![.., b * o..(b + 1) * o])
                .assign(&acts.pop().expect("at least one layer"));
            if keep {
                hidden.push(acts);
            }
        }
        let aux = if keep { Aux::Hidden(hidden) } else { Aux::None };
        (out, aux)
    }

    /// Adjoints of `x` (when requested) and `omegas`. Hidden activations not
    /// kept by the forward pass are recomputed one row at a time.
    fn backward(
        &self,
        g: &Matrix,
        (x, omegas): (&Matrix, &Matrix),
        aux: &Aux,
        want_x: bool,
    ) -> (Option<Matrix>, Matrix) {
        let o = self.outputs();
        let mut d_om = Array2::zeros(omegas.dim());
        let mut dx = want_x.then(|| Array2::zeros(x.dim()));
        for b in 0..omegas.nrows() {
            let weights = self.weights(omegas, b);
            let recomputed;
            let acts = match aux {
                Aux::Hidden(h) => &h[b],
                _ => {
                    recomputed = self.activations(x, &weights);
                    &recomputed
                }
            };
            let mut d = g.slice(s![.., b * o..(b + 1) * o]).to_owned();
            let mut offset = self.n_params();
            for l in (0..weights.len()).rev() {
                let (w, _) = &weights[l];
                let (i, o) = self.layers[l];
                offset -= i * o + o;
                let input = if l == 0 { x } else { &acts[l - 1] };
                let mut row = d_om.row_mut(b);
                let mut dw = row
                    .slice_mut(s![offset..offset + i * o])
                    .into_shape_with_order((i, o))
                    .expect("contiguous row");
                ndarray::linalg::general_mat_mul(1.0, &input.t(), &d, 0.0, &mut dw);
                row.slice_mut(s![offset + i * o..offset + i * o + o])
                    .assign(&d.sum_axis(Axis(0)));
                if l > 0 {
                    let mut prev = d.dot(&w.t());
                    prev.zip_mut_with(input, |p, &h| {
                        if h <= 0.0 {
                            *p = 0.0
                        }
                    });
                    d = prev;
                } else if let Some(dx) = dx.as_mut() {
                    ndarray::linalg::general_mat_mul(1.0, &d, &w.t(), 1.0, dx);
                }
            }
        }
        (dx, d_om)
    }
}

type Layer<'a> = (ndarray::ArrayView2<'a, f64>, ndarray::ArrayView1<'a, f64>);

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MaxAxis(..) => "max_axis",
            Op::Maximum(..) => "maximum",
            Op::StopGradient(..) => "stop_gradient",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::PickPerRow(..) => "pick_per_row",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LinearFixedPoint(..) => "linear_fixed_point",
            Op::HyperMlp(..) => "hyper_mlp",
        }
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Indices(Vec<usize>),
    /// Hidden activations per row of a [`HyperMlp`].
    Hidden(Vec<Vec<Matrix>>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    aux: Aux,
}

/// Recorded computation. Nodes are stored in topological order by
/// construction: an op can only reference handles that already exist.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Row-major reshape of a matrix with the same number of elements.
fn reshaped(m: &Matrix, shape: (usize, usize)) -> Matrix {
    m.as_standard_layout()
        .into_owned()
        .into_shape_with_order(shape)
        .expect("same length")
}

fn shape_err(node: usize, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn dims(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

/// Sum `grad` over the axes along which a value of `shape` was broadcast.
fn reduce_to(grad: Matrix, shape: (usize, usize)) -> Matrix {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

/// `I - A` for a square matrix, as a nalgebra matrix ready for LU.
fn identity_minus(a: &Matrix) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - a[[i, j]])
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `(1, 1)` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant leaf. Adjoints still reach it, but it is not a parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.leaf(Op::Input, value)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(Op::Param, value)
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param)
    }

    fn leaf(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node {
            op,
            value,
            aux: Aux::None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rebind a leaf. Call [`Tape::forward`] afterwards to refresh dependents.
    pub fn set(&mut self, v: Var, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Input | Op::Param) {
            return Err(Error::Invalid(format!("node {} is not a leaf", v.0)));
        }
        if dims(&node.value) != dims(&value) {
            return Err(shape_err(
                v.0,
                node.op.name(),
                format!("rebinding {:?} with {:?}", dims(&node.value), dims(&value)),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Recompute every non-leaf node in order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, aux) = self.eval(i, &op)?;
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        let (value, aux) = self.eval(id, &op)?;
        self.nodes.push(Node { op, value, aux });
        Ok(Var(id))
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn eval(&self, id: usize, op: &Op) -> Result<(Matrix, Aux)> {
        let name = op.name();
        let plain = |m: Matrix| Ok((m, Aux::None));
        match op {
            Op::Input | Op::Param => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Maximum(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let shape = broadcast_shape(dims(x), dims(y)).ok_or_else(|| {
                    shape_err(id, name, format!("{:?} vs {:?}", dims(x), dims(y)))
                })?;
                let xb = x.broadcast(shape).expect("checked");
                let yb = y.broadcast(shape).expect("checked");
                let out = match op {
                    Op::Add(..) => &xb + &yb,
                    Op::Sub(..) => &xb - &yb,
                    Op::Mul(..) => &xb * &yb,
                    _ => {
                        let mut out = xb.to_owned();
                        out.zip_mut_with(&yb, |o, &y| {
                            if y > *o {
                                *o = y
                            }
                        });
                        out
                    }
                };
                plain(out)
            }
            Op::Scale(a, c) => plain(self.val(*a) * *c),
            Op::MatMul(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                if x.ncols() != y.nrows() {
                    return Err(shape_err(
                        id,
                        name,
                        format!("{:?} x {:?}", dims(x), dims(y)),
                    ));
                }
                plain(x.dot(y))
            }
            Op::Transpose(a) => plain(self.val(*a).t().to_owned()),
            Op::Relu(a) => plain(self.val(*a).mapv(|x| if x > 0.0 { x } else { 0.0 })),
            Op::Square(a) => plain(self.val(*a).mapv(|x| x * x)),
            Op::Sum(a) => plain(Array2::from_elem((1, 1), self.val(*a).sum())),
            Op::Mean(a) => {
                let x = self.val(*a);
                if x.is_empty() {
                    return Err(shape_err(id, name, "mean of empty matrix".into()));
                }
                plain(Array2::from_elem((1, 1), x.sum() / x.len() as f64))
            }
            Op::MaxAxis(a, axis) => {
                let x = self.val(*a);
                let (r, c) = dims(x);
                if r == 0 || c == 0 {
                    return Err(shape_err(id, name, "max over empty axis".into()));
                }
                // Ties resolve to the lowest index.
                let argmax_of = |lane: ndarray::ArrayView1<f64>| {
                    let mut best = 0;
                    for (i, &v) in lane.iter().enumerate() {
                        if v > lane[best] {
                            best = i;
                        }
                    }
                    best
                };
                let (out, idx) = match axis {
                    ReduceAxis::Cols => {
                        let idx: Vec<usize> = x.rows().into_iter().map(argmax_of).collect();
                        let out = Array2::from_shape_fn((r, 1), |(i, _)| x[[i, idx[i]]]);
                        (out, idx)
                    }
                    ReduceAxis::Rows => {
                        let idx: Vec<usize> = x.columns().into_iter().map(argmax_of).collect();
                        let out = Array2::from_shape_fn((1, c), |(_, j)| x[[idx[j], j]]);
                        (out, idx)
                    }
                };
                Ok((out, Aux::Indices(idx)))
            }
            Op::StopGradient(a) => plain(self.val(*a).clone()),
            Op::SliceRows(a, start, end) => {
                let x = self.val(*a);
                if start > end || *end > x.nrows() {
                    return Err(shape_err(
                        id,
                        name,
                        format!("rows {start}..{end} of {:?}", dims(x)),
                    ));
                }
                plain(x.slice(s![*start..*end, ..]).to_owned())
            }
            Op::SliceCols(a, start, end) => {
                let x = self.val(*a);
                if start > end || *end > x.ncols() {
                    return Err(shape_err(
                        id,
                        name,
                        format!("cols {start}..{end} of {:?}", dims(x)),
                    ));
                }
                plain(x.slice(s![.., *start..*end]).to_owned())
            }
            Op::Reshape(a, r, c) => {
                let x = self.val(*a);
                if x.len() != r * c {
                    return Err(shape_err(
                        id,
                        name,
                        format!("{:?} into ({r}, {c})", dims(x)),
                    ));
                }
                plain(reshaped(x, (*r, *c)))
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(shape_err(id, name, "nothing to concatenate".into()));
                }
                let axis = if matches!(op, Op::ConcatCols(_)) {
                    Axis(1)
                } else {
                    Axis(0)
                };
                let views: Vec<_> = parts.iter().map(|p| self.val(*p).view()).collect();
                let out = ndarray::concatenate(axis, &views)
                    .map_err(|e| shape_err(id, name, e.to_string()))?;
                plain(out)
            }
            Op::GatherCols(a, index) => {
                let x = self.val(*a);
                if let Some(&bad) = index.iter().find(|&&j| j >= x.ncols()) {
                    return Err(shape_err(
                        id,
                        name,
                        format!("column {bad} out of {}", x.ncols()),
                    ));
                }
                plain(x.select(Axis(1), index))
            }
            Op::PickPerRow(a, index) => {
                let x = self.val(*a);
                if index.len() != x.nrows() {
                    return Err(shape_err(
                        id,
                        name,
                        format!("{} indices for {} rows", index.len(), x.nrows()),
                    ));
                }
                if let Some(&bad) = index.iter().find(|&&j| j >= x.ncols()) {
                    return Err(shape_err(
                        id,
                        name,
                        format!("column {bad} out of {}", x.ncols()),
                    ));
                }
                plain(Array2::from_shape_fn((x.nrows(), 1), |(i, _)| {
                    x[[i, index[i]]]
                }))
            }
            Op::SoftmaxRows(a) => {
                let mut out = self.val(*a).clone();
                for mut row in out.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|v| v / z);
                }
                plain(out)
            }
            Op::LinearFixedPoint(a, b) => {
                let (am, bm) = (self.val(*a), self.val(*b));
                let n = am.nrows();
                if am.ncols() != n || dims(bm) != (1, n) {
                    return Err(shape_err(
                        id,
                        name,
                        format!("A {:?}, b {:?}", dims(am), dims(bm)),
                    ));
                }
                let lu = identity_minus(am).lu();
                let rhs = DMatrix::from_fn(n, 1, |i, _| bm[[0, i]]);
                let x = lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::Invalid(format!("node {id}: I - A is singular")))?;
                plain(Array2::from_shape_fn((1, n), |(_, j)| x[(j, 0)]))
            }
            Op::HyperMlp(h) => {
                let (x, om) = (self.val(h.x), self.val(h.omegas));
                let chained = h.layers.windows(2).all(|p| p[0].1 == p[1].0);
                if h.layers.is_empty()
                    || !chained
                    || x.ncols() != h.layers[0].0
                    || om.ncols() != h.n_params()
                {
                    return Err(shape_err(
                        id,
                        name,
                        format!(
                            "input {:?}, omegas {:?}, layers {:?}",
                            dims(x),
                            dims(om),
                            h.layers
                        ),
                    ));
                }
                // Constant parameter rows never get an adjoint, so their
                // activations are not worth keeping.
                let keep = !matches!(self.nodes[h.omegas.0].op, Op::Input);
                Ok(h.forward(x, om, keep))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }
    pub fn max_axis(&mut self, a: Var, axis: ReduceAxis) -> Result<Var> {
        self.push(Op::MaxAxis(a, axis))
    }
    /// Element-wise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Maximum(a, b))
    }
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.push(Op::StopGradient(a))
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows(a, start, end))
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols(a, start, end))
    }
    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.push(Op::Reshape(a, rows, cols))
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }
    pub fn gather_cols(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherCols(a, index))
    }
    /// `out[i, 0] = a[i, index[i]]`.
    pub fn pick_per_row(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::PickPerRow(a, index))
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }
    /// Row vector `x` solving `x = x A^T + b`, i.e. `x^T = (I - A)^{-1} b^T`.
    pub fn linear_fixed_point(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::LinearFixedPoint(a, b))
    }

    /// A ReLU network for every row of `omegas` on the shared input `x`.
    /// Each row holds the `(inputs, outputs)` layers in order, every one a
    /// row-major weight matrix followed by its biases. The result has one
    /// `(r, outputs)` block of columns per row.
    pub fn hyper_mlp(&mut self, x: Var, omegas: Var, layers: &[(usize, usize)]) -> Result<Var> {
        self.push(Op::HyperMlp(HyperMlp {
            x,
            omegas,
            layers: layers.to_vec(),
        }))
    }

    /// Affine layer `x W + b` with `b` a row vector.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse sweep from a `(1, 1)` loss node. Constant leaves receive no
    /// adjoint.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = dims(self.val(loss));
        if shape != (1, 1) {
            return Err(Error::NotScalar {
                node: loss.0,
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));

        let constant: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| matches!(n.op, Op::Input))
            .collect();
        let acc = |adj: &mut [Option<Matrix>], v: Var, g: Matrix| {
            if constant[v.0] {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::StopGradient(_) => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, reduce_to(g.clone(), dims(self.val(*a))));
                    acc(&mut adj, *b, reduce_to(g.clone(), dims(self.val(*b))));
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, reduce_to(g.clone(), dims(self.val(*a))));
                    acc(&mut adj, *b, reduce_to(-&g, dims(self.val(*b))));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    acc(&mut adj, *a, reduce_to(&g * y, dims(x)));
                    acc(&mut adj, *b, reduce_to(&g * x, dims(y)));
                }
                Op::Maximum(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    let shape = dims(&g);
                    let xb = x.broadcast(shape).expect("forward checked");
                    let yb = y.broadcast(shape).expect("forward checked");
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&xb)
                        .and(&yb)
                        .for_each(
                            |ga, gb, &xv, &yv| {
                                if yv > xv {
                                    *ga = 0.0
                                } else {
                                    *gb = 0.0
                                }
                            },
                        );
                    acc(&mut adj, *a, reduce_to(ga, dims(x)));
                    acc(&mut adj, *b, reduce_to(gb, dims(y)));
                }
                Op::Scale(a, c) => acc(&mut adj, *a, &g * *c),
                Op::MatMul(a, b) => {
                    let (x, y) = (self.val(*a), self.val(*b));
                    if !constant[a.0] {
                        acc(&mut adj, *a, g.dot(&y.t()));
                    }
                    if !constant[b.0] {
                        acc(&mut adj, *b, x.t().dot(&g));
                    }
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.t().to_owned()),
                Op::Relu(a) => {
                    let x = self.val(*a);
                    let mut d = g.clone();
                    d.zip_mut_with(x, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut adj, *a, d);
                }
                Op::Square(a) => {
                    let x = self.val(*a);
                    acc(&mut adj, *a, &g * &(x * 2.0));
                }
                Op::Sum(a) => {
                    let x = self.val(*a);
                    acc(&mut adj, *a, Array2::from_elem(dims(x), g[[0, 0]]));
                }
                Op::Mean(a) => {
                    let x = self.val(*a);
                    let n = x.len() as f64;
                    acc(&mut adj, *a, Array2::from_elem(dims(x), g[[0, 0]] / n));
                }
                Op::MaxAxis(a, axis) => {
                    let x = self.val(*a);
                    let Aux::Indices(idx) = &node.aux else {
                        unreachable!("max_axis stores argmax")
                    };
                    let mut d = Array2::zeros(dims(x));
                    match axis {
                        ReduceAxis::Cols => {
                            for (i, &j) in idx.iter().enumerate() {
                                d[[i, j]] = g[[i, 0]];
                            }
                        }
                        ReduceAxis::Rows => {
                            for (j, &i) in idx.iter().enumerate() {
                                d[[i, j]] = g[[0, j]];
                            }
                        }
                    }
                    acc(&mut adj, *a, d);
                }
                Op::SliceRows(a, start, end) => {
                    let mut d = Array2::zeros(dims(self.val(*a)));
                    d.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut adj, *a, d);
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Array2::zeros(dims(self.val(*a)));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut adj, *a, d);
                }
                Op::Reshape(a, _, _) => {
                    acc(&mut adj, *a, reshaped(&g, dims(self.val(*a))));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.val(*p).ncols();
                        acc(&mut adj, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.val(*p).nrows();
                        acc(&mut adj, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::GatherCols(a, index) => {
                    let mut d = Array2::zeros(dims(self.val(*a)));
                    for (k, &j) in index.iter().enumerate() {
                        let mut col = d.column_mut(j);
                        col += &g.column(k);
                    }
                    acc(&mut adj, *a, d);
                }
                Op::PickPerRow(a, index) => {
                    let mut d = Array2::zeros(dims(self.val(*a)));
                    for (i, &j) in index.iter().enumerate() {
                        d[[i, j]] = g[[i, 0]];
                    }
                    acc(&mut adj, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |r, &yv| *r -= yv * dot);
                    }
                    acc(&mut adj, *a, d);
                }
                Op::LinearFixedPoint(a, b) => {
                    // x = (I - A)^{-1} b  =>  lambda = (I - A)^{-T} g,
                    // dA = lambda x^T, db = lambda.
                    let am = self.val(*a);
                    let n = am.nrows();
                    let x = &node.value;
                    let lu = identity_minus(am).transpose().lu();
                    let rhs = DMatrix::from_fn(n, 1, |i, _| g[[0, i]]);
                    let lambda = lu
                        .solve(&rhs)
                        .ok_or_else(|| Error::Invalid(format!("node {i}: I - A is singular")))?;
                    let da = Array2::from_shape_fn((n, n), |(r, c)| lambda[(r, 0)] * x[[0, c]]);
                    let db = Array2::from_shape_fn((1, n), |(_, c)| lambda[(c, 0)]);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::HyperMlp(h) => {
                    let (x, om) = (self.val(h.x), self.val(h.omegas));
                    let (dx, d_om) = h.backward(&g, (x, om), &node.aux, !constant[h.x.0]);
                    if let Some(dx) = dx {
                        acc(&mut adj, h.x, dx);
                    }
                    acc(&mut adj, h.omegas, d_om);
                }
            }
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adj,
            shapes: self.nodes.iter().map(|n| dims(&n.value)).collect(),
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf. Unreachable nodes yield
    /// an exact zero matrix of the node's shape.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.adj.get(v.0) {
            Some(Some(m)) => m.clone(),
            _ => Array2::zeros(self.shapes[v.0]),
        }
    }
}

/// Named slice of a [`DiffParams`] vector, viewed as a `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat vector of trainable scalars with a named-segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffParams {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl DiffParams {
    /// Zero-initialized parameters with the given `(name, rows, cols)` segments.
    pub fn zeros(segments: &[(&str, usize, usize)]) -> Self {
        let mut layout = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for &(name, rows, cols) in segments {
            layout.push(Segment {
                name: name.to_string(),
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        }
        Self {
            values: vec![0.0; offset],
            layout,
        }
    }

    pub fn from_matrices(named: Vec<(String, Matrix)>) -> Self {
        let mut layout = Vec::with_capacity(named.len());
        let mut values = Vec::new();
        for (name, m) in named {
            layout.push(Segment {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                offset: values.len(),
            });
            values.extend(m.iter().copied());
        }
        Self { values, layout }
    }

    pub fn empty() -> Self {
        Self {
            values: Vec::new(),
            layout: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::ParamLength {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.layout
    }

    pub fn segment(&self, name: &str) -> Option<Matrix> {
        let seg = self.layout.iter().find(|s| s.name == name)?;
        Some(self.matrix_of(seg))
    }

    fn matrix_of(&self, seg: &Segment) -> Matrix {
        Array2::from_shape_vec((seg.rows, seg.cols), self.values[seg.range()].to_vec())
            .expect("segment length matches shape")
    }

    /// One matrix per segment, in layout order.
    pub fn unflatten(&self) -> Vec<Matrix> {
        self.layout.iter().map(|s| self.matrix_of(s)).collect()
    }

    /// Inverse of [`DiffParams::unflatten`].
    pub fn flatten(&mut self, mats: &[Matrix]) -> Result<()> {
        if mats.len() != self.layout.len() {
            return Err(Error::Dimension(format!(
                "{} matrices for {} segments",
                mats.len(),
                self.layout.len()
            )));
        }
        for (seg, m) in self.layout.iter().zip(mats) {
            if (m.nrows(), m.ncols()) != (seg.rows, seg.cols) {
                return Err(Error::Dimension(format!(
                    "segment {} expects {}x{}",
                    seg.name, seg.rows, seg.cols
                )));
            }
            for (dst, src) in self.values[seg.range()].iter_mut().zip(m.iter()) {
                *dst = *src;
            }
        }
        Ok(())
    }

    /// Register every segment as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.unflatten()
            .into_iter()
            .map(|m| tape.param(m))
            .collect()
    }

    /// Register every segment as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.unflatten()
            .into_iter()
            .map(|m| tape.input(m))
            .collect()
    }

    /// Gather per-segment gradients into one flat vector matching `values`.
    pub fn collect_grad(&self, grads: &Gradients, vars: &[Var]) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for (seg, v) in self.layout.iter().zip(vars) {
            let g = grads.wrt(*v);
            for (dst, src) in out[seg.range()].iter_mut().zip(g.iter()) {
                *dst = *src;
            }
        }
        out
    }
}

/// Largest relative disagreement between the analytic gradient returned by
/// `f` and central finite differences at `point`.
///
/// `f` returns `(value, gradient)`. The relative error per coordinate is
/// `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn grad_check<F>(mut f: F, point: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = f(point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let (plus, _) = f(&x)?;
        x[i] = orig - epsilon;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
