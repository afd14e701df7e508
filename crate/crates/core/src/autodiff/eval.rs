//! Graph evaluation with reusable value buffers.
//!
//! An [`EvalBuffer`] owns one value slot per node and is reused across
//! evaluations of the same graph: tensors keep their allocations between
//! calls and a generation stamp marks which slots are current. Repeated
//! per-ray evaluations of a fixed template therefore run allocation-free.

use super::{ExprGraph, GraphError, NodeId, Op, SlotKind};
use crate::tensor::{Shape, Tensor};

/// Values bound to the parameter and input slots of one graph for one
/// evaluation. Holds references; nothing is copied.
#[derive(Debug)]
pub struct Bindings<'a> {
    params: Vec<Option<&'a Tensor>>,
    inputs: Vec<Option<&'a Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn for_graph(graph: &ExprGraph) -> Self {
        Bindings {
            params: vec![None; graph.params.len()],
            inputs: vec![None; graph.inputs.len()],
        }
    }

    pub fn bind_param(&mut self, idx: usize, value: &'a Tensor) -> &mut Self {
        self.params[idx] = Some(value);
        self
    }

    pub fn bind_input(&mut self, idx: usize, value: &'a Tensor) -> &mut Self {
        self.inputs[idx] = Some(value);
        self
    }

    /// Bind a slot by name, searching params first, then inputs.
    pub fn bind(&mut self, graph: &ExprGraph, name: &str, value: &'a Tensor) -> &mut Self {
        if let Some(i) = graph.params.iter().position(|d| d.name == name) {
            return self.bind_param(i, value);
        }
        if let Some(i) = graph.inputs.iter().position(|d| d.name == name) {
            return self.bind_input(i, value);
        }
        panic!("no slot named `{name}`");
    }

    fn get(&self, kind: SlotKind, idx: usize) -> Option<&'a Tensor> {
        match kind {
            SlotKind::Param => self.params[idx],
            SlotKind::Input => self.inputs[idx],
        }
    }

    fn check(&self, graph: &ExprGraph, kind: SlotKind, idx: usize) -> Result<&'a Tensor, GraphError> {
        let (decl, bound) = match kind {
            SlotKind::Param => (&graph.params[idx], self.params[idx]),
            SlotKind::Input => (&graph.inputs[idx], self.inputs[idx]),
        };
        let t = bound.ok_or_else(|| GraphError::UnboundSlot(decl.name.clone()))?;
        if t.shape != decl.shape {
            return Err(GraphError::BindingShape {
                name: decl.name.clone(),
                bound: t.shape,
                declared: decl.shape,
            });
        }
        Ok(t)
    }
}

/// Reusable evaluation workspace for one graph.
#[derive(Debug, Default)]
pub struct EvalBuffer {
    vals: Vec<Tensor>,
    stamp: Vec<u32>,
    need: Vec<u32>,
    gen: u32,
    dfs: Vec<NodeId>,
}

impl EvalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start a fresh evaluation: previously computed values are forgotten but
    /// their allocations are kept.
    pub fn begin(&mut self, graph: &ExprGraph) {
        if self.vals.len() < graph.len() {
            self.vals.resize_with(graph.len(), || Tensor::scalar(0.0));
            self.stamp.resize(graph.len(), 0);
            self.need.resize(graph.len(), 0);
        }
        self.gen = self.gen.wrapping_add(1);
        if self.gen == 0 {
            // Stamp wrap: invalidate everything explicitly.
            self.stamp.iter_mut().for_each(|s| *s = u32::MAX);
            self.need.iter_mut().for_each(|s| *s = u32::MAX);
            self.gen = 1;
        }
    }

    /// Compute `root` and all of its missing ancestors. Values computed by
    /// earlier `ensure` calls since the last `begin` are reused as-is, which
    /// lets a caller evaluate forward outputs first and gradient outputs
    /// later without recomputation.
    pub fn ensure(
        &mut self,
        graph: &ExprGraph,
        binds: &Bindings<'_>,
        root: NodeId,
    ) -> Result<(), GraphError> {
        debug_assert!(self.vals.len() >= graph.len(), "call begin() first");
        // Mark needed ancestors (stop at already-computed nodes).
        self.dfs.clear();
        self.dfs.push(root);
        let mut max_id = 0;
        while let Some(id) = self.dfs.pop() {
            if self.need[id] == self.gen || self.stamp[id] == self.gen {
                continue;
            }
            self.need[id] = self.gen;
            max_id = max_id.max(id);
            let dfs = &mut self.dfs;
            graph.nodes[id].op.for_each_operand(|o| dfs.push(o));
        }
        for id in 0..=max_id {
            if self.need[id] != self.gen || self.stamp[id] == self.gen {
                continue;
            }
            match graph.nodes[id].op {
                Op::Param(i) => {
                    binds.check(graph, SlotKind::Param, i)?;
                }
                Op::Input(i) => {
                    binds.check(graph, SlotKind::Input, i)?;
                }
                _ => {
                    let mut out = std::mem::take(&mut self.vals[id]);
                    compute(graph, binds, &self.vals, id, &mut out);
                    self.vals[id] = out;
                }
            }
            self.stamp[id] = self.gen;
        }
        Ok(())
    }

    /// Value of a node computed by a previous `ensure` in this generation.
    pub fn value<'b>(
        &'b self,
        graph: &ExprGraph,
        binds: &Bindings<'b>,
        id: NodeId,
    ) -> &'b Tensor {
        match graph.nodes[id].op {
            Op::Param(i) => binds.get(SlotKind::Param, i).expect("param bound"),
            Op::Input(i) => binds.get(SlotKind::Input, i).expect("input bound"),
            _ => {
                debug_assert!(self.stamp[id] == self.gen, "node {id} not computed");
                &self.vals[id]
            }
        }
    }
}

impl Op {
    pub(crate) fn for_each_operand(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Param(_) | Op::Input(_) | Op::Const(_) => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Dot(a, b)
            | Op::Outer(a, b)
            | Op::AddColVec(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Neg(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x, _)
            | Op::Abs(x)
            | Op::Sign(x)
            | Op::Relu(x)
            | Op::Step(x)
            | Op::Sum(x)
            | Op::RowSum(x)
            | Op::ColSum(x)
            | Op::CumSumExclusive(x)
            | Op::Reverse(x)
            | Op::Slice { x, .. }
            | Op::SliceRows { x, .. }
            | Op::PadZero { x, .. }
            | Op::PadZeroRows { x, .. }
            | Op::Reshape { x, .. } => f(*x),
            Op::MatVec { m, v, .. } => {
                f(*m);
                f(*v);
            }
            Op::MatMul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Concat(parts) | Op::ConcatRows(parts) => {
                for &p in parts {
                    f(p);
                }
            }
        }
    }
}

fn prep(out: &mut Tensor, shape: Shape) {
    out.shape = shape;
    out.data.resize(shape.len(), 0.0);
}

#[inline]
fn stable_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn stable_softplus(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    if t > 30.0 {
        x + (-t).exp().ln_1p() / beta
    } else {
        t.exp().ln_1p() / beta
    }
}

fn compute(
    graph: &ExprGraph,
    binds: &Bindings<'_>,
    vals: &[Tensor],
    id: NodeId,
    out: &mut Tensor,
) {
    let val = |i: NodeId| -> &Tensor {
        match graph.nodes[i].op {
            Op::Param(k) => binds.get(SlotKind::Param, k).expect("checked"),
            Op::Input(k) => binds.get(SlotKind::Input, k).expect("checked"),
            _ => &vals[i],
        }
    };
    let shape = graph.nodes[id].shape;
    match &graph.nodes[id].op {
        Op::Param(_) | Op::Input(_) => unreachable!("slots resolved by caller"),
        Op::Const(t) => {
            prep(out, shape);
            out.data.copy_from_slice(&t.data);
        }
        Op::Add(a, b) => ew_binary(val(*a), val(*b), out, shape, |x, y| x + y),
        Op::Sub(a, b) => ew_binary(val(*a), val(*b), out, shape, |x, y| x - y),
        Op::Mul(a, b) => ew_binary(val(*a), val(*b), out, shape, |x, y| x * y),
        Op::Div(a, b) => ew_binary(val(*a), val(*b), out, shape, |x, y| x / y),
        Op::Neg(x) => ew_unary(val(*x), out, shape, |v| -v),
        Op::Sin(x) => ew_unary(val(*x), out, shape, f64::sin),
        Op::Cos(x) => ew_unary(val(*x), out, shape, f64::cos),
        Op::Tanh(x) => ew_unary(val(*x), out, shape, f64::tanh),
        Op::Exp(x) => ew_unary(val(*x), out, shape, f64::exp),
        Op::Log(x) => ew_unary(val(*x), out, shape, f64::ln),
        Op::Sqrt(x) => ew_unary(val(*x), out, shape, f64::sqrt),
        Op::Sigmoid(x) => ew_unary(val(*x), out, shape, stable_sigmoid),
        Op::Softplus(x, beta) => {
            let b = *beta;
            ew_unary(val(*x), out, shape, |v| stable_softplus(v, b))
        }
        Op::Abs(x) => ew_unary(val(*x), out, shape, f64::abs),
        Op::Sign(x) => ew_unary(val(*x), out, shape, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Relu(x) => ew_unary(val(*x), out, shape, |v| if v > 0.0 { v } else { 0.0 }),
        Op::Step(x) => ew_unary(val(*x), out, shape, |v| if v > 0.0 { 1.0 } else { 0.0 }),
        Op::Dot(a, b) => {
            prep(out, shape);
            out.data[0] = val(*a).dot(val(*b));
        }
        Op::Sum(x) => {
            prep(out, shape);
            let mut acc = 0.0;
            for v in &val(*x).data {
                acc += v;
            }
            out.data[0] = acc;
        }
        Op::MatVec { m, v, transpose } => {
            let (mt, vt) = (val(*m), val(*v));
            let (r, c) = match mt.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            prep(out, shape);
            out.data.iter_mut().for_each(|o| *o = 0.0);
            if !transpose {
                for i in 0..r {
                    let row = &mt.data[i * c..(i + 1) * c];
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += row[j] * vt.data[j];
                    }
                    out.data[i] = acc;
                }
            } else {
                for i in 0..r {
                    let row = &mt.data[i * c..(i + 1) * c];
                    let a = vt.data[i];
                    for j in 0..c {
                        out.data[j] += row[j] * a;
                    }
                }
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            matmul(val(*a), val(*b), *ta, *tb, out, shape);
        }
        Op::Outer(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            prep(out, shape);
            let c = bt.len();
            for i in 0..at.len() {
                let ai = at.data[i];
                let row = &mut out.data[i * c..(i + 1) * c];
                for j in 0..c {
                    row[j] = ai * bt.data[j];
                }
            }
        }
        Op::AddColVec(m, v) => {
            let (mt, vt) = (val(*m), val(*v));
            let (r, c) = match mt.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            prep(out, shape);
            for i in 0..r {
                let bias = vt.data[i];
                let src = &mt.data[i * c..(i + 1) * c];
                let dst = &mut out.data[i * c..(i + 1) * c];
                for j in 0..c {
                    dst[j] = src[j] + bias;
                }
            }
        }
        Op::RowSum(m) => {
            let mt = val(*m);
            let (r, c) = match mt.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            prep(out, shape);
            for i in 0..r {
                let row = &mt.data[i * c..(i + 1) * c];
                let mut acc = 0.0;
                for v in row {
                    acc += v;
                }
                out.data[i] = acc;
            }
        }
        Op::ColSum(m) => {
            let mt = val(*m);
            let (r, c) = match mt.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            prep(out, shape);
            out.data.iter_mut().for_each(|o| *o = 0.0);
            for i in 0..r {
                let row = &mt.data[i * c..(i + 1) * c];
                for j in 0..c {
                    out.data[j] += row[j];
                }
            }
        }
        Op::Concat(parts) => {
            prep(out, shape);
            let mut off = 0;
            for &p in parts {
                let pt = val(p);
                out.data[off..off + pt.len()].copy_from_slice(&pt.data);
                off += pt.len();
            }
        }
        Op::ConcatRows(parts) => {
            prep(out, shape);
            let mut off = 0;
            for &p in parts {
                let pt = val(p);
                out.data[off..off + pt.len()].copy_from_slice(&pt.data);
                off += pt.len();
            }
        }
        Op::Slice { x, start, len } => {
            let xt = val(*x);
            prep(out, shape);
            out.data.copy_from_slice(&xt.data[*start..start + len]);
        }
        Op::SliceRows { x, start, len } => {
            let xt = val(*x);
            let c = match xt.shape {
                Shape::Matrix(_, c) => c,
                _ => unreachable!(),
            };
            prep(out, shape);
            out.data.copy_from_slice(&xt.data[start * c..(start + len) * c]);
        }
        Op::PadZero { x, before, .. } => {
            let xt = val(*x);
            prep(out, shape);
            out.data.iter_mut().for_each(|o| *o = 0.0);
            out.data[*before..before + xt.len()].copy_from_slice(&xt.data);
        }
        Op::PadZeroRows { x, before, .. } => {
            let xt = val(*x);
            let c = match xt.shape {
                Shape::Matrix(_, c) => c,
                _ => unreachable!(),
            };
            prep(out, shape);
            out.data.iter_mut().for_each(|o| *o = 0.0);
            out.data[before * c..before * c + xt.len()].copy_from_slice(&xt.data);
        }
        Op::Reshape { x, .. } => {
            let xt = val(*x);
            prep(out, shape);
            out.data.copy_from_slice(&xt.data);
        }
        Op::CumSumExclusive(x) => {
            let xt = val(*x);
            prep(out, shape);
            let mut acc = 0.0;
            for i in 0..xt.len() {
                out.data[i] = acc;
                acc += xt.data[i];
            }
        }
        Op::Reverse(x) => {
            let xt = val(*x);
            prep(out, shape);
            let n = xt.len();
            for i in 0..n {
                out.data[i] = xt.data[n - 1 - i];
            }
        }
    }
}

fn ew_unary(x: &Tensor, out: &mut Tensor, shape: Shape, f: impl Fn(f64) -> f64) {
    prep(out, shape);
    for i in 0..x.data.len() {
        out.data[i] = f(x.data[i]);
    }
}

fn ew_binary(a: &Tensor, b: &Tensor, out: &mut Tensor, shape: Shape, f: impl Fn(f64, f64) -> f64) {
    prep(out, shape);
    if a.shape == b.shape {
        for i in 0..a.data.len() {
            out.data[i] = f(a.data[i], b.data[i]);
        }
    } else if a.shape.is_scalar() {
        let av = a.data[0];
        for i in 0..b.data.len() {
            out.data[i] = f(av, b.data[i]);
        }
    } else {
        let bv = b.data[0];
        for i in 0..a.data.len() {
            out.data[i] = f(a.data[i], bv);
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool, out: &mut Tensor, shape: Shape) {
    let (ar, ac) = match a.shape {
        Shape::Matrix(r, c) => (r, c),
        _ => unreachable!(),
    };
    let (br, bc) = match b.shape {
        Shape::Matrix(r, c) => (r, c),
        _ => unreachable!(),
    };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    prep(out, shape);
    out.data.iter_mut().for_each(|o| *o = 0.0);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                for p in 0..k {
                    let av = a.data[i * ac + p];
                    let brow = &b.data[p * bc..(p + 1) * bc];
                    let orow = &mut out.data[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &a.data[p * ac..(p + 1) * ac];
                let brow = &b.data[p * bc..(p + 1) * bc];
                for i in 0..m {
                    let av = arow[i];
                    let orow = &mut out.data[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a.data[i * ac..(i + 1) * ac];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    let brow = &b.data[j * bc..(j + 1) * bc];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    orow[j] = acc;
                }
            }
        }
        (true, true) => {
            for j in 0..n {
                let brow = &b.data[j * bc..(j + 1) * bc];
                for p in 0..k {
                    let bv = brow[p];
                    let arow = &a.data[p * ac..(p + 1) * ac];
                    for i in 0..m {
                        out.data[i * n + j] += arow[i] * bv;
                    }
                }
            }
        }
    }
}

/// Evaluate a single root against bindings, allocating a fresh workspace.
/// Callers in hot loops keep their own [`EvalBuffer`] instead.
pub fn evaluate(
    graph: &ExprGraph,
    binds: &Bindings<'_>,
    root: NodeId,
) -> Result<Tensor, GraphError> {
    let mut buf = EvalBuffer::new();
    buf.begin(graph);
    buf.ensure(graph, binds, root)?;
    Ok(buf.value(graph, binds, root).clone())
}
