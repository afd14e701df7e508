//! Reverse-mode differentiation over dense f64 arrays.
//!
//! The engine records expressions as an append-only node arena ([`ExprGraph`]).
//! Differentiation emits the adjoint computation as *new nodes over the same
//! slots*, so a gradient is itself an expression and can be differentiated
//! again. Training losses in this crate run that chain three levels deep:
//! field value -> spatial gradient (normal) -> parameter gradient of the
//! normal -> training gradient of a loss built from those.
//!
//! Determinism: adjoint contributions accumulate in consumer order, reductions
//! run in ascending index order, and evaluation never consults an RNG, so two
//! evaluations of one graph against equal bindings are bit-identical.

mod check;
mod eval;
mod grad;

pub use check::check_gradient;
pub use eval::{evaluate, Bindings, EvalBuffer};
pub use grad::{gradient, GradientRequest};

use crate::tensor::{Shape, Tensor};
use std::collections::HashMap;
use thiserror::Error;

/// Index of a node in its [`ExprGraph`].
pub type NodeId = usize;

/// Errors raised by graph evaluation and differentiation.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("slot `{0}` is not bound")]
    UnboundSlot(String),
    #[error("slot `{name}` bound with shape {bound}, declared {declared}")]
    BindingShape { name: String, bound: Shape, declared: Shape },
    #[error("node {0} is not a scalar root")]
    NonScalarRoot(NodeId),
    #[error("gradient target {0} is not a slot of this graph")]
    UnknownTarget(NodeId),
    #[error("nested gradient request needs a single target (got {0})")]
    AmbiguousNesting(usize),
    #[error("finite-difference step must be positive (got {0})")]
    BadStep(f64),
}

/// Whether a slot holds trainable parameters or per-call inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Param,
    Input,
}

#[derive(Debug, Clone)]
pub struct SlotDecl {
    pub name: String,
    pub shape: Shape,
}

/// Primitive operations. Every rule in `grad.rs` emits only ops from this set,
/// which keeps the set closed under repeated differentiation. `Sign` and
/// `Step` carry the subgradient-0 convention for the kinks of `Abs` and
/// `Relu`; their own derivative is zero everywhere.
#[derive(Debug, Clone)]
pub enum Op {
    Param(usize),
    Input(usize),
    Const(Tensor),

    // Elementwise; binary ops accept equal shapes or a scalar on either side.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    /// log(1 + exp(beta x)) / beta, evaluated in stable form.
    Softplus(NodeId, f64),
    Abs(NodeId),
    Sign(NodeId),
    Relu(NodeId),
    Step(NodeId),

    // Reductions and linear algebra.
    Dot(NodeId, NodeId),
    Sum(NodeId),
    MatVec { m: NodeId, v: NodeId, transpose: bool },
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Outer(NodeId, NodeId),
    /// Matrix plus a column vector broadcast across columns.
    AddColVec(NodeId, NodeId),
    /// Sum over columns -> vector of row sums.
    RowSum(NodeId),
    /// Sum over rows -> vector of column sums.
    ColSum(NodeId),

    // Structure.
    Concat(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice { x: NodeId, start: usize, len: usize },
    SliceRows { x: NodeId, start: usize, len: usize },
    PadZero { x: NodeId, before: usize, after: usize },
    PadZeroRows { x: NodeId, before: usize, after: usize },
    Reshape { x: NodeId, shape: Shape },
    /// out[i] = sum_{j < i} x[j]
    CumSumExclusive(NodeId),
    Reverse(NodeId),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub shape: Shape,
}

/// Key used for common-subexpression reuse. Floats are keyed by their bit
/// pattern; only scalar constants participate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum CseKey {
    ScalarConst(u64),
    Unary(u8, NodeId),
    UnaryF(u8, NodeId, u64),
    Binary(u8, NodeId, NodeId),
    MatVec(NodeId, NodeId, bool),
    MatMul(NodeId, NodeId, bool, bool),
    Slice(u8, NodeId, usize, usize),
    Reshape(NodeId, Shape),
    Many(u8, Vec<NodeId>),
}

/// Append-only expression arena: operation nodes plus named parameter and
/// input slots. Operands always precede their consumers, so ascending node
/// order is a valid evaluation order.
#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<SlotDecl>,
    pub(crate) inputs: Vec<SlotDecl>,
    cse: HashMap<CseKey, NodeId>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_shape(&self, id: NodeId) -> Shape {
        self.nodes[id].shape
    }

    pub fn param_decls(&self) -> &[SlotDecl] {
        &self.params
    }

    pub fn input_decls(&self) -> &[SlotDecl] {
        &self.inputs
    }

    /// Slot index of a param/input node, if it is one.
    pub fn slot_of(&self, id: NodeId) -> Option<(SlotKind, usize)> {
        match self.nodes[id].op {
            Op::Param(i) => Some((SlotKind::Param, i)),
            Op::Input(i) => Some((SlotKind::Input, i)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        let key = cse_key(&op);
        if let Some(k) = &key {
            if let Some(&id) = self.cse.get(k) {
                return id;
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape });
        if let Some(k) = key {
            self.cse.insert(k, id);
        }
        id
    }

    /// Declare a named parameter slot and return its leaf node.
    pub fn param(&mut self, name: &str, shape: Shape) -> NodeId {
        let idx = self.params.len();
        self.params.push(SlotDecl { name: name.to_string(), shape });
        self.push(Op::Param(idx), shape)
    }

    /// Declare a named input slot and return its leaf node.
    pub fn input(&mut self, name: &str, shape: Shape) -> NodeId {
        let idx = self.inputs.len();
        self.inputs.push(SlotDecl { name: name.to_string(), shape });
        self.push(Op::Input(idx), shape)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape;
        self.push(Op::Const(t), shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn ew_binary_shape(&self, a: NodeId, b: NodeId, what: &str) -> Shape {
        let sa = self.nodes[a].shape;
        let sb = self.nodes[b].shape;
        if sa == sb {
            sa
        } else if sa.is_scalar() {
            sb
        } else if sb.is_scalar() {
            sa
        } else {
            panic!("{what}: incompatible shapes {sa} and {sb}");
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.ew_binary_shape(a, b, "add");
        self.push(Op::Add(a, b), s)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.ew_binary_shape(a, b, "sub");
        self.push(Op::Sub(a, b), s)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.ew_binary_shape(a, b, "mul");
        self.push(Op::Mul(a, b), s)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.ew_binary_shape(a, b, "div");
        self.push(Op::Div(a, b), s)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Neg(x), s)
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Sin(x), s)
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Cos(x), s)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Tanh(x), s)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Exp(x), s)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Log(x), s)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Sqrt(x), s)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Sigmoid(x), s)
    }

    pub fn softplus(&mut self, x: NodeId, beta: f64) -> NodeId {
        assert!(beta > 0.0, "softplus beta must be positive");
        let s = self.nodes[x].shape;
        self.push(Op::Softplus(x, beta), s)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Abs(x), s)
    }

    pub fn sign(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Sign(x), s)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Relu(x), s)
    }

    pub fn step(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        self.push(Op::Step(x), s)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.nodes[a].shape, self.nodes[b].shape);
        assert_eq!(sa.len(), sb.len(), "dot: length mismatch {sa} vs {sb}");
        self.push(Op::Dot(a, b), Shape::Scalar)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), Shape::Scalar)
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId, transpose: bool) -> NodeId {
        let (r, c) = match self.nodes[m].shape {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("matvec: left operand must be a matrix, got {s}"),
        };
        let n = match self.nodes[v].shape {
            Shape::Vector(n) => n,
            s => panic!("matvec: right operand must be a vector, got {s}"),
        };
        let (expect, out) = if transpose { (r, c) } else { (c, r) };
        assert_eq!(n, expect, "matvec: dimension mismatch");
        self.push(Op::MatVec { m, v, transpose }, Shape::Vector(out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let (ar, ac) = match self.nodes[a].shape {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("matmul: left operand must be a matrix, got {s}"),
        };
        let (br, bc) = match self.nodes[b].shape {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("matmul: right operand must be a matrix, got {s}"),
        };
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k1, k2, "matmul: inner dimension mismatch");
        self.push(Op::MatMul { a, b, ta, tb }, Shape::Matrix(m, n))
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let r = match self.nodes[a].shape {
            Shape::Vector(n) => n,
            s => panic!("outer: operands must be vectors, got {s}"),
        };
        let c = match self.nodes[b].shape {
            Shape::Vector(n) => n,
            s => panic!("outer: operands must be vectors, got {s}"),
        };
        self.push(Op::Outer(a, b), Shape::Matrix(r, c))
    }

    pub fn add_col_vec(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (r, c) = match self.nodes[m].shape {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("add_col_vec: left operand must be a matrix, got {s}"),
        };
        match self.nodes[v].shape {
            Shape::Vector(n) if n == r => {}
            s => panic!("add_col_vec: vector must match rows ({r}), got {s}"),
        }
        self.push(Op::AddColVec(m, v), Shape::Matrix(r, c))
    }

    pub fn row_sum(&mut self, m: NodeId) -> NodeId {
        let r = match self.nodes[m].shape {
            Shape::Matrix(r, _) => r,
            s => panic!("row_sum: operand must be a matrix, got {s}"),
        };
        self.push(Op::RowSum(m), Shape::Vector(r))
    }

    pub fn col_sum(&mut self, m: NodeId) -> NodeId {
        let c = match self.nodes[m].shape {
            Shape::Matrix(_, c) => c,
            s => panic!("col_sum: operand must be a matrix, got {s}"),
        };
        self.push(Op::ColSum(m), Shape::Vector(c))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: empty part list");
        let mut total = 0;
        for &p in parts {
            total += match self.nodes[p].shape {
                Shape::Vector(n) => n,
                Shape::Scalar => 1,
                s => panic!("concat: parts must be vectors or scalars, got {s}"),
            };
        }
        self.push(Op::Concat(parts.to_vec()), Shape::Vector(total))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: empty part list");
        let cols = match self.nodes[parts[0]].shape {
            Shape::Matrix(_, c) => c,
            s => panic!("concat_rows: parts must be matrices, got {s}"),
        };
        let mut rows = 0;
        for &p in parts {
            match self.nodes[p].shape {
                Shape::Matrix(r, c) if c == cols => rows += r,
                s => panic!("concat_rows: column mismatch, got {s}"),
            }
        }
        self.push(Op::ConcatRows(parts.to_vec()), Shape::Matrix(rows, cols))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let n = match self.nodes[x].shape {
            Shape::Vector(n) => n,
            s => panic!("slice: operand must be a vector, got {s}"),
        };
        assert!(start + len <= n, "slice out of range");
        self.push(Op::Slice { x, start, len }, Shape::Vector(len))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = match self.nodes[x].shape {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("slice_rows: operand must be a matrix, got {s}"),
        };
        assert!(start + len <= r, "slice_rows out of range");
        self.push(Op::SliceRows { x, start, len }, Shape::Matrix(len, c))
    }

    pub fn pad_zero(&mut self, x: NodeId, before: usize, after: usize) -> NodeId {
        let n = match self.nodes[x].shape {
            Shape::Vector(n) => n,
            s => panic!("pad_zero: operand must be a vector, got {s}"),
        };
        self.push(Op::PadZero { x, before, after }, Shape::Vector(before + n + after))
    }

    pub fn pad_zero_rows(&mut self, x: NodeId, before: usize, after: usize) -> NodeId {
        let (r, c) = match self.nodes[x].shape {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("pad_zero_rows: operand must be a matrix, got {s}"),
        };
        self.push(Op::PadZeroRows { x, before, after }, Shape::Matrix(before + r + after, c))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Shape) -> NodeId {
        assert_eq!(self.nodes[x].shape.len(), shape.len(), "reshape: element count mismatch");
        self.push(Op::Reshape { x, shape }, shape)
    }

    pub fn cumsum_exclusive(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        assert!(matches!(s, Shape::Vector(_)), "cumsum_exclusive: operand must be a vector");
        self.push(Op::CumSumExclusive(x), s)
    }

    pub fn reverse(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].shape;
        assert!(matches!(s, Shape::Vector(_)), "reverse: operand must be a vector");
        self.push(Op::Reverse(x), s)
    }

    // ---- helpers composed from primitives ----

    /// x * c for a scalar constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = self.scalar(c);
        self.mul(x, k)
    }

    /// W x + b (affine map).
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> NodeId {
        let mv = self.matvec(w, x, false);
        self.add(mv, b)
    }

    /// Euclidean norm sqrt(x . x).
    pub fn norm(&mut self, x: NodeId) -> NodeId {
        let d = self.dot(x, x);
        self.sqrt(d)
    }

    /// Cosine similarity a.b / (|a| |b|).
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let num = self.dot(a, b);
        let na = self.norm(a);
        let nb = self.norm(b);
        let den = self.mul(na, nb);
        self.div(num, den)
    }

    /// min(x, c) built as c - relu(c - x); exact identity for x < c.
    pub fn min_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let k = self.scalar(c);
        let d = self.sub(k, x);
        let r = self.relu(d);
        self.sub(k, r)
    }
}

fn cse_key(op: &Op) -> Option<CseKey> {
    Some(match op {
        Op::Const(t) if t.shape.is_scalar() => CseKey::ScalarConst(t.data[0].to_bits()),
        Op::Const(_) | Op::Param(_) | Op::Input(_) => return None,
        Op::Add(a, b) => CseKey::Binary(0, *a, *b),
        Op::Sub(a, b) => CseKey::Binary(1, *a, *b),
        Op::Mul(a, b) => CseKey::Binary(2, *a, *b),
        Op::Div(a, b) => CseKey::Binary(3, *a, *b),
        Op::Dot(a, b) => CseKey::Binary(4, *a, *b),
        Op::Outer(a, b) => CseKey::Binary(5, *a, *b),
        Op::AddColVec(a, b) => CseKey::Binary(6, *a, *b),
        Op::Neg(x) => CseKey::Unary(0, *x),
        Op::Sin(x) => CseKey::Unary(1, *x),
        Op::Cos(x) => CseKey::Unary(2, *x),
        Op::Tanh(x) => CseKey::Unary(3, *x),
        Op::Exp(x) => CseKey::Unary(4, *x),
        Op::Log(x) => CseKey::Unary(5, *x),
        Op::Sqrt(x) => CseKey::Unary(6, *x),
        Op::Sigmoid(x) => CseKey::Unary(7, *x),
        Op::Abs(x) => CseKey::Unary(8, *x),
        Op::Sign(x) => CseKey::Unary(9, *x),
        Op::Relu(x) => CseKey::Unary(10, *x),
        Op::Step(x) => CseKey::Unary(11, *x),
        Op::Sum(x) => CseKey::Unary(12, *x),
        Op::RowSum(x) => CseKey::Unary(13, *x),
        Op::ColSum(x) => CseKey::Unary(14, *x),
        Op::CumSumExclusive(x) => CseKey::Unary(15, *x),
        Op::Reverse(x) => CseKey::Unary(16, *x),
        Op::Softplus(x, beta) => CseKey::UnaryF(0, *x, beta.to_bits()),
        Op::MatVec { m, v, transpose } => CseKey::MatVec(*m, *v, *transpose),
        Op::MatMul { a, b, ta, tb } => CseKey::MatMul(*a, *b, *ta, *tb),
        Op::Slice { x, start, len } => CseKey::Slice(0, *x, *start, *len),
        Op::SliceRows { x, start, len } => CseKey::Slice(1, *x, *start, *len),
        Op::PadZero { x, before, after } => CseKey::Slice(2, *x, *before, *after),
        Op::PadZeroRows { x, before, after } => CseKey::Slice(3, *x, *before, *after),
        Op::Reshape { x, shape } => CseKey::Reshape(*x, *shape),
        Op::Concat(parts) => CseKey::Many(0, parts.clone()),
        Op::ConcatRows(parts) => CseKey::Many(1, parts.clone()),
    })
}
