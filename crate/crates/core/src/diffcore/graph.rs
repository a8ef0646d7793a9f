//! Reverse-mode differentiation over an explicit computation record.
//!
//! Every operation appends a node holding its value and the recipe needed to
//! push an output gradient back to its inputs. [`Graph::backward`] walks the
//! record once in reverse.

use super::tensor::Tensor;
use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Softplus,
    Softsign,
    Elu,
    /// Derivative of ELU with respect to its input.
    EluDeriv,
    Exp,
    Log,
    Square,
    Sqrt,
    Huber(f64),
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Softplus => "softplus",
            Unary::Softsign => "softsign",
            Unary::Elu => "elu",
            Unary::EluDeriv => "elu_deriv",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Huber(_) => "huber",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        use super::activations as act;
        match self {
            Unary::Sigmoid => act::sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu(s) => act::leaky_relu(x, s),
            Unary::Softplus => act::softplus(x),
            Unary::Softsign => act::softsign(x),
            Unary::Elu => act::elu(x),
            Unary::EluDeriv => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Huber(d) => act::huber(x, d),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Softplus => super::activations::sigmoid(x),
            Unary::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::EluDeriv => {
                if x > 0.0 {
                    0.0
                } else {
                    y
                }
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Huber(d) => x.clamp(-d, d),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Broadcast(Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    Reshape(Var),
    SumAll(Var),
    RowSum(Var),
    RowSoftmax(Var),
    RowLogSumExp(Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    BatchMatMul(Var, Var, [usize; 3]),
    BatchTranspose(Var, [usize; 2]),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Broadcast(_) => "broadcast",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::Unary(_, u) => u.name(),
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Reshape(_) => "reshape",
            Op::SumAll(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::RowSoftmax(_) => "row_softmax",
            Op::RowLogSumExp(_) => "row_logsumexp",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::BatchTranspose(..) => "batch_transpose",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A first op that produced a non-finite value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonFiniteOp {
    pub node: usize,
    pub op: &'static str,
}

/// Computation record. Cheap to create; one per evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    first_non_finite: Cell<Option<NonFiniteOp>>,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn reduce_to(g: &Tensor, rows: usize, cols: usize) -> Tensor {
    if g.shape() == (rows, cols) {
        return g.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    let gc = g.cols();
    for r in 0..g.rows() {
        for c in 0..gc {
            let (or, oc) = (if rows == 1 { 0 } else { r }, if cols == 1 { 0 } else { c });
            let v = out.get(or, oc) + g.data()[r * gc + c];
            out.set(or, oc, v);
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// First op whose output contained NaN or ±∞, if any.
    pub fn first_non_finite(&self) -> Option<NonFiniteOp> {
        self.first_non_finite.get()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.all_finite() {
            self.first_non_finite.set(Some(NonFiniteOp {
                node: id,
                op: op.name(),
            }));
        }
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(&self.value(b));
        self.push(out, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), self.needs(a))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(
                va.shape(),
                vb.shape(),
                "{}: shape mismatch {:?} vs {:?}",
                op.name(),
                va.shape(),
                vb.shape()
            );
            va.zip_map(&vb, f)
        };
        self.push(out, op, self.needs(a) || self.needs(b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Expands a `1 × 1`, `r × 1` or `1 × c` tensor to `rows × cols`.
    pub fn broadcast(&self, a: Var, rows: usize, cols: usize) -> Var {
        let out = {
            let va = self.value(a);
            let (ar, ac) = va.shape();
            if (ar, ac) == (rows, cols) {
                drop(va);
                return a;
            }
            assert!(
                (ar == 1 || ar == rows) && (ac == 1 || ac == cols),
                "cannot broadcast {ar}x{ac} to {rows}x{cols}"
            );
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    out.set(r, c, va.get(if ar == 1 { 0 } else { r }, if ac == 1 { 0 } else { c }));
                }
            }
            out
        };
        self.push(out, Op::Broadcast(a), self.needs(a))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.needs(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), self.needs(a))
    }

    pub fn unary(&self, a: Var, u: Unary) -> Var {
        let out = self.value(a).map(|x| u.apply(x));
        self.push(out, Op::Unary(a, u), self.needs(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn softsign(&self, a: Var) -> Var {
        self.unary(a, Unary::Softsign)
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn elu_deriv(&self, a: Var) -> Var {
        self.unary(a, Unary::EluDeriv)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn huber(&self, a: Var, delta: f64) -> Var {
        self.unary(a, Unary::Huber(delta))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals[0].rows();
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &vals {
                    assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::from_vec(rows, cols, data)
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let va = self.value(a);
            assert!(start + len <= va.cols(), "slice_cols out of range");
            let mut data = Vec::with_capacity(va.rows() * len);
            for r in 0..va.rows() {
                data.extend_from_slice(&va.row(r)[start..start + len]);
            }
            Tensor::from_vec(va.rows(), len, data)
        };
        self.push(out, Op::SliceCols(a, start), self.needs(a))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = vals[0].cols();
            let rows: usize = vals.iter().map(|v| v.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in &vals {
                assert_eq!(v.cols(), cols, "concat_rows col mismatch");
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(rows, cols, data)
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let va = self.value(a);
            assert!(start + len <= va.rows(), "slice_rows out of range");
            let c = va.cols();
            Tensor::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec())
        };
        self.push(out, Op::SliceRows(a, start), self.needs(a))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&self, a: Var, index: Rc<[usize]>) -> Var {
        let out = {
            let va = self.value(a);
            let c = va.cols();
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index.iter() {
                data.extend_from_slice(va.row(i));
            }
            Tensor::from_vec(index.len(), c, data)
        };
        self.push(out, Op::GatherRows(a, index), self.needs(a))
    }

    /// Row `i` of `a` is added into row `index[i]` of an `n`-row output.
    pub fn scatter_rows(&self, a: Var, index: Rc<[usize]>, n: usize) -> Var {
        let out = {
            let va = self.value(a);
            assert_eq!(va.rows(), index.len(), "scatter_rows index length");
            let c = va.cols();
            let mut out = Tensor::zeros(n, c);
            let od = out.data_mut();
            for (r, &t) in index.iter().enumerate() {
                for (o, &x) in od[t * c..(t + 1) * c].iter_mut().zip(va.row(r)) {
                    *o += x;
                }
            }
            out
        };
        self.push(out, Op::ScatterRows(a, index), self.needs(a))
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(rows, cols);
        self.push(out, Op::Reshape(a), self.needs(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), self.needs(a))
    }

    /// Sum of each row, as an `r × 1` tensor.
    pub fn row_sum(&self, a: Var) -> Var {
        let out = {
            let va = self.value(a);
            let sums: Vec<f64> = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
            Tensor::col_vector(&sums)
        };
        self.push(out, Op::RowSum(a), self.needs(a))
    }

    /// Softmax along each row. Entries with `mask == false` get probability
    /// zero and take no part in normalization.
    pub fn row_softmax(&self, a: Var, mask: Option<&[bool]>) -> Var {
        let out = {
            let va = self.value(a);
            let (r, c) = va.shape();
            if let Some(m) = mask {
                assert_eq!(m.len(), r * c, "softmax mask size");
            }
            let keep = |i: usize| mask.map_or(true, |m| m[i]);
            let mut out = Tensor::zeros(r, c);
            for row in 0..r {
                let base = row * c;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..c {
                    if keep(base + j) {
                        mx = mx.max(va.data()[base + j]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..c {
                    if keep(base + j) {
                        let e = (va.data()[base + j] - mx).exp();
                        out.data_mut()[base + j] = e;
                        total += e;
                    }
                }
                for j in 0..c {
                    out.data_mut()[base + j] /= total;
                }
            }
            out
        };
        self.push(out, Op::RowSoftmax(a), self.needs(a))
    }

    /// `log Σ_j exp(a_ij)` per row, as an `r × 1` tensor.
    pub fn row_logsumexp(&self, a: Var) -> Var {
        let out = {
            let va = self.value(a);
            let vals: Vec<f64> = (0..va.rows())
                .map(|r| {
                    let row = va.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    if mx == f64::NEG_INFINITY {
                        return mx;
                    }
                    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::col_vector(&vals)
        };
        self.push(out, Op::RowLogSumExp(a), self.needs(a))
    }

    /// Column-wise softmax over groups of rows sharing the same `segment`
    /// id.
    pub fn segment_softmax(&self, a: Var, segment: Rc<[usize]>, n_segments: usize) -> Var {
        let out = {
            let va = self.value(a);
            let (r, c) = va.shape();
            assert_eq!(segment.len(), r, "segment_softmax index length");
            let mut mx = vec![f64::NEG_INFINITY; n_segments * c];
            for (row, &s) in segment.iter().enumerate() {
                for j in 0..c {
                    let m = &mut mx[s * c + j];
                    *m = m.max(va.get(row, j));
                }
            }
            let mut out = Tensor::zeros(r, c);
            let mut total = vec![0.0; n_segments * c];
            for (row, &s) in segment.iter().enumerate() {
                for j in 0..c {
                    let e = (va.get(row, j) - mx[s * c + j]).exp();
                    out.set(row, j, e);
                    total[s * c + j] += e;
                }
            }
            for (row, &s) in segment.iter().enumerate() {
                for j in 0..c {
                    let v = out.get(row, j) / total[s * c + j];
                    out.set(row, j, v);
                }
            }
            out
        };
        self.push(out, Op::SegmentSoftmax(a, segment), self.needs(a))
    }

    /// Row-wise small-matrix product: each row of `a` holds an `n × m`
    /// matrix, each row of `b` an `m × p` matrix; the output row holds their
    /// `n × p` product.
    pub fn bmm(&self, a: Var, b: Var, n: usize, m: usize, p: usize) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.rows(), vb.rows(), "bmm batch mismatch");
            assert_eq!(va.cols(), n * m, "bmm lhs width");
            assert_eq!(vb.cols(), m * p, "bmm rhs width");
            let rows = va.rows();
            let mut out = Tensor::zeros(rows, n * p);
            for r in 0..rows {
                let (ar, br) = (va.row(r), vb.row(r));
                let o = &mut out.data_mut()[r * n * p..(r + 1) * n * p];
                for i in 0..n {
                    for k in 0..m {
                        let x = ar[i * m + k];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..p {
                            o[i * p + j] += x * br[k * p + j];
                        }
                    }
                }
            }
            out
        };
        self.push(out, Op::BatchMatMul(a, b, [n, m, p]), self.needs(a) || self.needs(b))
    }

    /// Row-wise transpose of `n × m` matrices.
    pub fn btranspose(&self, a: Var, n: usize, m: usize) -> Var {
        let out = batch_transpose(&self.value(a), n, m);
        self.push(out, Op::BatchTranspose(a, [n, m]), self.needs(a))
    }

    /// `x · w + b` with `b` a `1 × out` row broadcast over rows.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        let (r, c) = self.shape(xw);
        let bb = self.broadcast(b, r, c);
        self.add(xw, bb)
    }

    /// Multiplies every column of `a` by the `r × 1` column `c`.
    pub fn mul_col(&self, a: Var, c: Var) -> Var {
        let (r, k) = self.shape(a);
        let cb = self.broadcast(c, r, k);
        self.mul(a, cb)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].needs_grad;
            let mut send = |v: Var, t: Tensor| {
                if nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], t);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        send(*a, g.matmul_t(val(*b)));
                    }
                    if needs(*b) {
                        send(*b, val(*a).t_matmul(&g));
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    if needs(*a) {
                        send(*a, g.clone());
                    }
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        send(*a, g.clone());
                    }
                    if needs(*b) {
                        send(*b, g.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        send(*a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        send(*b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    if needs(*a) {
                        send(*a, g.zip_map(val(*b), |x, y| x / y));
                    }
                    if needs(*b) {
                        // d(a/b)/db = -out / b
                        let t = g
                            .zip_map(&node.value, |x, o| x * o)
                            .zip_map(val(*b), |x, y| -x / y);
                        send(*b, t);
                    }
                }
                Op::Broadcast(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, reduce_to(&g, r, c));
                }
                Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
                Op::Offset(a) => send(*a, g),
                Op::Unary(a, u) => {
                    let x = val(*a);
                    let mut t = g;
                    for ((gi, &xi), &yi) in t.data_mut().iter_mut().zip(x.data()).zip(node.value.data()) {
                        *gi *= u.derivative(xi, yi);
                    }
                    send(*a, t);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        if needs(p) {
                            let mut data = Vec::with_capacity(g.rows() * w);
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row(r)[start..start + w]);
                            }
                            send(p, Tensor::from_vec(g.rows(), w, data));
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut t = Tensor::zeros(r, c);
                    let w = g.cols();
                    for row in 0..r {
                        t.data_mut()[row * c + start..row * c + start + w].copy_from_slice(g.row(row));
                    }
                    send(*a, t);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        if needs(p) {
                            send(p, Tensor::from_vec(h, c, g.data()[start * c..(start + h) * c].to_vec()));
                        }
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut t = Tensor::zeros(r, c);
                    t.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    send(*a, t);
                }
                Op::GatherRows(a, index) => {
                    let (r, c) = val(*a).shape();
                    let mut t = Tensor::zeros(r, c);
                    for (row, &src) in index.iter().enumerate() {
                        for (o, &x) in t.data_mut()[src * c..(src + 1) * c].iter_mut().zip(g.row(row)) {
                            *o += x;
                        }
                    }
                    send(*a, t);
                }
                Op::ScatterRows(a, index) => {
                    let c = g.cols();
                    let mut data = Vec::with_capacity(index.len() * c);
                    for &t in index.iter() {
                        data.extend_from_slice(g.row(t));
                    }
                    send(*a, Tensor::from_vec(index.len(), c, data));
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, g.reshape(r, c));
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Tensor::filled(r, c, g.item()));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    let mut t = Tensor::zeros(r, c);
                    for row in 0..r {
                        let gv = g.data()[row];
                        t.data_mut()[row * c..(row + 1) * c].fill(gv);
                    }
                    send(*a, t);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut t = Tensor::zeros(r, c);
                    for row in 0..r {
                        let yr = y.row(row);
                        let gr = g.row(row);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            t.data_mut()[row * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*a, t);
                }
                Op::RowLogSumExp(a) => {
                    let x = val(*a);
                    let (r, c) = x.shape();
                    let mut t = Tensor::zeros(r, c);
                    for row in 0..r {
                        let lse = node.value.data()[row];
                        let gv = g.data()[row];
                        for j in 0..c {
                            t.data_mut()[row * c + j] = gv * (x.get(row, j) - lse).exp();
                        }
                    }
                    send(*a, t);
                }
                Op::SegmentSoftmax(a, segment) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg * c];
                    for (row, &s) in segment.iter().enumerate() {
                        for j in 0..c {
                            dot[s * c + j] += y.get(row, j) * g.get(row, j);
                        }
                    }
                    let mut t = Tensor::zeros(r, c);
                    for (row, &s) in segment.iter().enumerate() {
                        for j in 0..c {
                            t.set(row, j, y.get(row, j) * (g.get(row, j) - dot[s * c + j]));
                        }
                    }
                    send(*a, t);
                }
                Op::BatchMatMul(a, b, [n, m, p]) => {
                    let (n, m, p) = (*n, *m, *p);
                    let (va, vb) = (val(*a), val(*b));
                    let rows = g.rows();
                    if needs(*a) {
                        // dA = dC · Bᵀ
                        let mut t = Tensor::zeros(rows, n * m);
                        for r in 0..rows {
                            let (gr, br) = (g.row(r), vb.row(r));
                            let o = &mut t.data_mut()[r * n * m..(r + 1) * n * m];
                            for i in 0..n {
                                for k in 0..m {
                                    let mut s = 0.0;
                                    for j in 0..p {
                                        s += gr[i * p + j] * br[k * p + j];
                                    }
                                    o[i * m + k] = s;
                                }
                            }
                        }
                        send(*a, t);
                    }
                    if needs(*b) {
                        // dB = Aᵀ · dC
                        let mut t = Tensor::zeros(rows, m * p);
                        for r in 0..rows {
                            let (gr, ar) = (g.row(r), va.row(r));
                            let o = &mut t.data_mut()[r * m * p..(r + 1) * m * p];
                            for i in 0..n {
                                for k in 0..m {
                                    let x = ar[i * m + k];
                                    if x == 0.0 {
                                        continue;
                                    }
                                    for j in 0..p {
                                        o[k * p + j] += x * gr[i * p + j];
                                    }
                                }
                            }
                        }
                        send(*b, t);
                    }
                }
                Op::BatchTranspose(a, [n, m]) => send(*a, batch_transpose(&g, *m, *n)),
            }
        }
        Gradients { grads }
    }
}

fn batch_transpose(a: &Tensor, n: usize, m: usize) -> Tensor {
    assert_eq!(a.cols(), n * m, "btranspose width");
    let rows = a.rows();
    let mut out = Tensor::zeros(rows, n * m);
    for r in 0..rows {
        let ar = a.row(r);
        let o = &mut out.data_mut()[r * n * m..(r + 1) * n * m];
        for i in 0..n {
            for j in 0..m {
                o[j * n + i] = ar[i * m + j];
            }
        }
    }
    out
}
