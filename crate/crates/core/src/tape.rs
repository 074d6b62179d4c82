//! Dynamic reverse-mode differentiation tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so a node's parents always have smaller ids and the
//! reverse of insertion order is a valid reverse topological order. The
//! backward pass walks it once, from the root down to node 0.
//!
//! ```
//! use hdmoe_core::{Graph, Matrix};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Matrix::row_vector(vec![1.0, 2.0]));
//! let y = g.square(x).unwrap();
//! let loss = g.sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
//! ```

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Position of a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Log,
    Exp,
    Abs,
    Sqrt,
    Square,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => libm::tanh(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Unary::Log => libm::log(x),
            Unary::Exp => libm::exp(x),
            Unary::Abs => libm::fabs(x),
            Unary::Sqrt => libm::sqrt(x),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Abs => "abs",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Softmax of a slice, max-subtracted.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| libm::exp(x - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScaleBy(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    Unary(NodeId, Unary),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sum(NodeId),
    Transpose(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    Permute { x: NodeId, perm: Arc<[usize]> },
    RowSoftmax(NodeId),
    LogSoftmax(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// The tape. Confined to one thread; build a fresh one per forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root w.r.t. every node reached by the backward pass.
/// Nodes the root does not depend on have no entry.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// The single entry of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(name));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Insert an input (parameter or constant). Panics on non-finite data.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        assert!(value.is_finite(), "leaf values must be finite");
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    /// Element-wise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b), "div")
    }

    /// Multiply every entry of `x` by the `1×1` node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by",
                left: self.shape(x),
                right: self.shape(s),
            });
        }
        let k = self.scalar(s);
        let v = self.value(x).scale(k);
        self.push(v, Op::ScaleBy(x, s), "scale_by")
    }

    /// `scale * x + shift`, constants.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(v, Op::Affine { x, scale }, "affine")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.affine(x, c, 0.0)
    }

    pub fn unary(&mut self, x: NodeId, kind: Unary) -> Result<NodeId> {
        let v = self.value(x).map(|e| kind.apply(e));
        self.push(v, Op::Unary(x, kind), kind.name())
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Relu)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Exp)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Abs)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Unary::Square)
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(x).map(|e| e.clamp(lo, hi));
        self.push(v, Op::Clamp { x, lo, hi }, "clamp")
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Matrix::filled(1, 1, self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), "transpose")
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        if start + len > src.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                left: src.shape(),
                right: (start, len),
            });
        }
        let v = Matrix::from_fn(src.rows(), len, |r, c| src.get(r, start + c));
        self.push(v, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::config("concat_cols of zero parts"));
        };
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let shape = self.shape(p);
            if shape.0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: shape,
                });
            }
            cols += shape.1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Matrix::new(rows, cols, data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// `out[i] = x[perm[i]]` on a `1×n` node.
    pub fn permute_entries(&mut self, x: NodeId, perm: Arc<[usize]>) -> Result<NodeId> {
        let src = self.value(x);
        if src.rows() != 1 {
            return Err(Error::Shape {
                op: "permute_entries",
                left: src.shape(),
                right: (1, perm.len()),
            });
        }
        validate_permutation(&perm, src.cols())?;
        let data = perm.iter().map(|&i| src.as_slice()[i]).collect();
        let v = Matrix::row_vector(data);
        self.push(v, Op::Permute { x, perm }, "permute_entries")
    }

    /// Softmax of each row, max-subtracted.
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        if src.cols() == 0 {
            return Err(Error::config("row_softmax of an empty row"));
        }
        let mut data = Vec::with_capacity(src.len());
        for r in 0..src.rows() {
            data.extend(softmax(src.row(r)));
        }
        let v = Matrix::new(src.rows(), src.cols(), data)?;
        self.push(v, Op::RowSoftmax(x), "row_softmax")
    }

    /// Log-softmax of each row.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let src = self.value(x);
        if src.cols() == 0 {
            return Err(Error::config("log_softmax of an empty row"));
        }
        let mut data = Vec::with_capacity(src.len());
        for r in 0..src.rows() {
            let row = src.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
            data.extend(row.iter().map(|&v| v - lse));
        }
        let v = Matrix::new(src.rows(), src.cols(), data)?;
        self.push(v, Op::LogSoftmax(x), "log_softmax")
    }

    /// Propagate from a `1×1` root. Every reachable node gets a gradient of its
    /// own shape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(root),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul(&bv.transpose())?);
                    accumulate(&mut grads, *b, av.transpose().matmul(&g)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul'", |g, y| g * y)?;
                    let gb = g.zip_map(self.value(*a), "mul'", |g, x| g * x)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = g.zip_map(bv, "div'", |g, y| g / y)?;
                    let gb = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        let y = bv.get(r, c);
                        -g.get(r, c) * self.value(*a).get(r, c) / (y * y)
                    });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScaleBy(x, s) => {
                    let k = self.scalar(*s);
                    let gs = g.dot(self.value(*x));
                    accumulate(&mut grads, *x, g.scale(k));
                    accumulate(&mut grads, *s, Matrix::filled(1, 1, gs));
                }
                Op::Affine { x, scale } => {
                    accumulate(&mut grads, *x, g.scale(*scale));
                }
                Op::Unary(x, kind) => {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let gx = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                        g.get(r, c) * kind.derivative(xv.get(r, c), yv.get(r, c))
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    let gx = g.zip_map(xv, "clamp'", |g, v| {
                        if v < *lo || v > *hi {
                            0.0
                        } else {
                            g
                        }
                    })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut grads, *x, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose());
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gx.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let gp = Matrix::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::Permute { x, perm } => {
                    let mut gx = Matrix::zeros(1, perm.len());
                    let dst = gx.as_mut_slice();
                    for (i, &src) in perm.iter().enumerate() {
                        dst[src] = g.as_slice()[i];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, g.get(r, c) - libm::exp(y.get(r, c)) * total);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Check that `perm` is a bijection on `0..n`.
pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(alloc::format!(
            "length {} for {} entries",
            perm.len(),
            n
        )));
    }
    let mut seen = vec![false; n];
    for &i in perm {
        if i >= n || seen[i] {
            return Err(Error::InvalidPermutation(alloc::format!(
                "index {i} out of range or repeated"
            )));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Inverse of a valid permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
