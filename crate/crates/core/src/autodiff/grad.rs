//! Reverse-pass emission: adjoints are appended to the graph as ordinary
//! nodes, so every gradient is itself differentiable. Contributions to one
//! adjoint are folded left-to-right in consumer order, giving a fixed
//! reduction order for gradient accumulation.

use super::{ExprGraph, GraphError, NodeId, Op};
use crate::tensor::{Shape, Tensor};

/// A request to differentiate a scalar root with respect to a set of target
/// nodes (typically slots). `nesting` > 1 re-differentiates the (scalar)
/// result that many times against the single target.
#[derive(Debug, Clone)]
pub struct GradientRequest {
    pub root: NodeId,
    pub targets: Vec<NodeId>,
    pub nesting: usize,
}

impl GradientRequest {
    pub fn new(root: NodeId, targets: Vec<NodeId>) -> Self {
        GradientRequest { root, targets, nesting: 1 }
    }

    pub fn nested(root: NodeId, target: NodeId, nesting: usize) -> Self {
        GradientRequest { root, targets: vec![target], nesting }
    }
}

/// Derive a new graph that computes the requested gradient. The input graph
/// is untouched; the returned graph shares its slot declarations and exposes
/// one root per target.
pub fn gradient(
    graph: &ExprGraph,
    req: &GradientRequest,
) -> Result<(ExprGraph, Vec<NodeId>), GraphError> {
    if req.nesting == 0 || req.targets.is_empty() {
        return Err(GraphError::AmbiguousNesting(req.targets.len()));
    }
    for &t in &req.targets {
        if t >= graph.len() {
            return Err(GraphError::UnknownTarget(t));
        }
    }
    let mut g = graph.clone();
    let mut roots = g.grad_scalar(req.root, &req.targets)?;
    for _ in 1..req.nesting {
        if roots.len() != 1 {
            return Err(GraphError::AmbiguousNesting(roots.len()));
        }
        roots = g.grad_scalar(roots[0], &req.targets)?;
    }
    Ok((g, roots))
}

impl ExprGraph {
    /// Gradient of a scalar root: vjp seeded with 1.
    pub fn grad_scalar(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, GraphError> {
        if !self.nodes[root].shape.is_scalar() {
            return Err(GraphError::NonScalarRoot(root));
        }
        let seed = self.scalar(1.0);
        self.vjp(root, seed, wrt)
    }

    /// Vector-Jacobian product: emits nodes computing
    /// `d(seed . root)/d(wrt_i)` and returns one node per target. Targets
    /// that cannot influence the root yield constant zeros of their shape.
    pub fn vjp(&mut self, root: NodeId, seed: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, GraphError> {
        for &t in wrt {
            if t >= self.len() {
                return Err(GraphError::UnknownTarget(t));
            }
        }
        assert_eq!(
            self.nodes[seed].shape,
            self.nodes[root].shape,
            "vjp seed shape must match root shape"
        );

        // Nodes the root depends on.
        let mut reach = vec![false; root + 1];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if reach[id] {
                continue;
            }
            reach[id] = true;
            self.nodes[id].op.for_each_operand(|o| stack.push(o));
        }
        // Nodes influenced by any target (operands precede consumers, so one
        // ascending scan suffices).
        let mut influenced = vec![false; root + 1];
        for &t in wrt {
            if t <= root {
                influenced[t] = true;
            }
        }
        for id in 0..=root {
            if influenced[id] {
                continue;
            }
            let mut hit = false;
            self.nodes[id].op.for_each_operand(|o| hit |= influenced[o]);
            influenced[id] = hit;
        }
        let relevant = |id: NodeId| id <= root && reach[id] && influenced[id];

        let mut adj: Vec<Option<NodeId>> = vec![None; root + 1];
        adj[root] = Some(seed);
        for id in (0..=root).rev() {
            if !relevant(id) {
                continue;
            }
            let a = match adj[id] {
                Some(a) => a,
                None => continue,
            };
            self.emit_adjoints(id, a, &mut adj, &relevant);
        }

        Ok(wrt
            .iter()
            .map(|&t| {
                adj.get(t).copied().flatten().unwrap_or_else(|| {
                    let shape = self.nodes[t].shape;
                    self.constant(Tensor::zeros(shape))
                })
            })
            .collect())
    }

    fn accumulate(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) {
        adj[target] = Some(match adj[target] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    /// If a broadcast widened a scalar operand, fold the adjoint back down.
    fn reduce_like(&mut self, contrib: NodeId, operand_shape: Shape) -> NodeId {
        if operand_shape.is_scalar() && !self.nodes[contrib].shape.is_scalar() {
            self.sum(contrib)
        } else {
            contrib
        }
    }

    fn emit_adjoints(
        &mut self,
        id: NodeId,
        a: NodeId,
        adj: &mut Vec<Option<NodeId>>,
        relevant: &dyn Fn(NodeId) -> bool,
    ) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Param(_) | Op::Input(_) | Op::Const(_) => {}
            Op::Add(x, y) => {
                if relevant(x) {
                    let sx = self.nodes[x].shape;
                    let c = self.reduce_like(a, sx);
                    self.accumulate(adj, x, c);
                }
                if relevant(y) {
                    let sy = self.nodes[y].shape;
                    let c = self.reduce_like(a, sy);
                    self.accumulate(adj, y, c);
                }
            }
            Op::Sub(x, y) => {
                if relevant(x) {
                    let sx = self.nodes[x].shape;
                    let c = self.reduce_like(a, sx);
                    self.accumulate(adj, x, c);
                }
                if relevant(y) {
                    let n = self.neg(a);
                    let sy = self.nodes[y].shape;
                    let c = self.reduce_like(n, sy);
                    self.accumulate(adj, y, c);
                }
            }
            Op::Mul(x, y) => {
                if relevant(x) {
                    let m = self.mul(a, y);
                    let sx = self.nodes[x].shape;
                    let c = self.reduce_like(m, sx);
                    self.accumulate(adj, x, c);
                }
                if relevant(y) {
                    let m = self.mul(a, x);
                    let sy = self.nodes[y].shape;
                    let c = self.reduce_like(m, sy);
                    self.accumulate(adj, y, c);
                }
            }
            Op::Div(x, y) => {
                if relevant(x) {
                    let d = self.div(a, y);
                    let sx = self.nodes[x].shape;
                    let c = self.reduce_like(d, sx);
                    self.accumulate(adj, x, c);
                }
                if relevant(y) {
                    // d(x/y)/dy = -z/y with z the forward quotient.
                    let zy = self.div(id, y);
                    let m = self.mul(a, zy);
                    let n = self.neg(m);
                    let sy = self.nodes[y].shape;
                    let c = self.reduce_like(n, sy);
                    self.accumulate(adj, y, c);
                }
            }
            Op::Neg(x) => {
                if relevant(x) {
                    let c = self.neg(a);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Sin(x) => {
                if relevant(x) {
                    let d = self.cos(x);
                    let c = self.mul(a, d);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Cos(x) => {
                if relevant(x) {
                    let s = self.sin(x);
                    let m = self.mul(a, s);
                    let c = self.neg(m);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Tanh(x) => {
                if relevant(x) {
                    let tt = self.mul(id, id);
                    let one = self.scalar(1.0);
                    let d = self.sub(one, tt);
                    let c = self.mul(a, d);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Exp(x) => {
                if relevant(x) {
                    let c = self.mul(a, id);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Log(x) => {
                if relevant(x) {
                    let c = self.div(a, x);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Sqrt(x) => {
                if relevant(x) {
                    let two = self.scalar(2.0);
                    let den = self.mul(id, two);
                    let c = self.div(a, den);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Sigmoid(x) => {
                if relevant(x) {
                    let one = self.scalar(1.0);
                    let om = self.sub(one, id);
                    let d = self.mul(id, om);
                    let c = self.mul(a, d);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Softplus(x, beta) => {
                if relevant(x) {
                    let sx = self.scale(x, beta);
                    let d = self.sigmoid(sx);
                    let c = self.mul(a, d);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Abs(x) => {
                if relevant(x) {
                    let s = self.sign(x);
                    let c = self.mul(a, s);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Relu(x) => {
                if relevant(x) {
                    let s = self.step(x);
                    let c = self.mul(a, s);
                    self.accumulate(adj, x, c);
                }
            }
            // Subgradient-0 convention: the kink indicators are locally
            // constant, so nothing propagates through them.
            Op::Sign(_) | Op::Step(_) => {}
            Op::Dot(x, y) => {
                if relevant(x) {
                    let c = self.mul(a, y);
                    self.accumulate(adj, x, c);
                }
                if relevant(y) {
                    let c = self.mul(a, x);
                    self.accumulate(adj, y, c);
                }
            }
            Op::Sum(x) => {
                if relevant(x) {
                    let sx = self.nodes[x].shape;
                    let c = if sx.is_scalar() {
                        a
                    } else {
                        let ones = self.constant(Tensor::ones(sx));
                        self.mul(ones, a)
                    };
                    self.accumulate(adj, x, c);
                }
            }
            Op::MatVec { m, v, transpose } => {
                if !transpose {
                    if relevant(m) {
                        let c = self.outer(a, v);
                        self.accumulate(adj, m, c);
                    }
                    if relevant(v) {
                        let c = self.matvec(m, a, true);
                        self.accumulate(adj, v, c);
                    }
                } else {
                    if relevant(m) {
                        let c = self.outer(v, a);
                        self.accumulate(adj, m, c);
                    }
                    if relevant(v) {
                        let c = self.matvec(m, a, false);
                        self.accumulate(adj, v, c);
                    }
                }
            }
            Op::MatMul { a: x, b: y, ta, tb } => {
                match (ta, tb) {
                    (false, false) => {
                        if relevant(x) {
                            let c = self.matmul(a, y, false, true);
                            self.accumulate(adj, x, c);
                        }
                        if relevant(y) {
                            let c = self.matmul(x, a, true, false);
                            self.accumulate(adj, y, c);
                        }
                    }
                    (true, false) => {
                        if relevant(x) {
                            let c = self.matmul(y, a, false, true);
                            self.accumulate(adj, x, c);
                        }
                        if relevant(y) {
                            let c = self.matmul(x, a, false, false);
                            self.accumulate(adj, y, c);
                        }
                    }
                    (false, true) => {
                        if relevant(x) {
                            let c = self.matmul(a, y, false, false);
                            self.accumulate(adj, x, c);
                        }
                        if relevant(y) {
                            let c = self.matmul(a, x, true, false);
                            self.accumulate(adj, y, c);
                        }
                    }
                    (true, true) => {
                        if relevant(x) {
                            let c = self.matmul(y, a, true, true);
                            self.accumulate(adj, x, c);
                        }
                        if relevant(y) {
                            let c = self.matmul(a, x, true, true);
                            self.accumulate(adj, y, c);
                        }
                    }
                }
            }
            Op::Outer(x, y) => {
                if relevant(x) {
                    let c = self.matvec(a, y, false);
                    self.accumulate(adj, x, c);
                }
                if relevant(y) {
                    let c = self.matvec(a, x, true);
                    self.accumulate(adj, y, c);
                }
            }
            Op::AddColVec(m, v) => {
                if relevant(m) {
                    self.accumulate(adj, m, a);
                }
                if relevant(v) {
                    let c = self.row_sum(a);
                    self.accumulate(adj, v, c);
                }
            }
            Op::RowSum(m) => {
                if relevant(m) {
                    let c_cols = match self.nodes[m].shape {
                        Shape::Matrix(_, c) => c,
                        _ => unreachable!(),
                    };
                    let ones = self.constant(Tensor::ones(Shape::Vector(c_cols)));
                    let c = self.outer(a, ones);
                    self.accumulate(adj, m, c);
                }
            }
            Op::ColSum(m) => {
                if relevant(m) {
                    let rows = match self.nodes[m].shape {
                        Shape::Matrix(r, _) => r,
                        _ => unreachable!(),
                    };
                    let ones = self.constant(Tensor::ones(Shape::Vector(rows)));
                    let c = self.outer(ones, a);
                    self.accumulate(adj, m, c);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let sp = self.nodes[p].shape;
                    let n = sp.len();
                    if relevant(p) {
                        let mut c = self.slice(a, off, n);
                        if sp.is_scalar() {
                            c = self.reshape(c, Shape::Scalar);
                        }
                        self.accumulate(adj, p, c);
                    }
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = match self.nodes[p].shape {
                        Shape::Matrix(r, _) => r,
                        _ => unreachable!(),
                    };
                    if relevant(p) {
                        let c = self.slice_rows(a, off, r);
                        self.accumulate(adj, p, c);
                    }
                    off += r;
                }
            }
            Op::Slice { x, start, len } => {
                if relevant(x) {
                    let n = self.nodes[x].shape.len();
                    let c = self.pad_zero(a, start, n - start - len);
                    self.accumulate(adj, x, c);
                }
            }
            Op::SliceRows { x, start, len } => {
                if relevant(x) {
                    let r = match self.nodes[x].shape {
                        Shape::Matrix(r, _) => r,
                        _ => unreachable!(),
                    };
                    let c = self.pad_zero_rows(a, start, r - start - len);
                    self.accumulate(adj, x, c);
                }
            }
            Op::PadZero { x, before, .. } => {
                if relevant(x) {
                    let n = self.nodes[x].shape.len();
                    let c = self.slice(a, before, n);
                    self.accumulate(adj, x, c);
                }
            }
            Op::PadZeroRows { x, before, .. } => {
                if relevant(x) {
                    let r = match self.nodes[x].shape {
                        Shape::Matrix(r, _) => r,
                        _ => unreachable!(),
                    };
                    let c = self.slice_rows(a, before, r);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Reshape { x, .. } => {
                if relevant(x) {
                    let sx = self.nodes[x].shape;
                    let c = self.reshape(a, sx);
                    self.accumulate(adj, x, c);
                }
            }
            Op::CumSumExclusive(x) => {
                if relevant(x) {
                    let r1 = self.reverse(a);
                    let cs = self.cumsum_exclusive(r1);
                    let c = self.reverse(cs);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Reverse(x) => {
                if relevant(x) {
                    let c = self.reverse(a);
                    self.accumulate(adj, x, c);
                }
            }
        }
    }
}
