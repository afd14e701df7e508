//! Central-difference gradient checking.

use super::{Bindings, EvalBuffer, ExprGraph, GraphError, NodeId, SlotKind};
use crate::tensor::Tensor;

/// Compare the analytic gradient of a scalar `root` with central finite
/// differences at the bound point, perturbing every element of the `target`
/// slot. Returns the maximum relative error over components.
///
/// The denominator is floored at 0.01: central differences carry rounding
/// noise of order eps * |f| / (2 step) regardless of the true gradient, so
/// near-zero components are compared on that absolute scale instead of
/// amplifying noise.
///
/// `params` and `inputs` supply one tensor per declared slot, in declaration
/// order.
pub fn check_gradient(
    graph: &ExprGraph,
    root: NodeId,
    target: NodeId,
    params: &[Tensor],
    inputs: &[Tensor],
    step: f64,
) -> Result<f64, GraphError> {
    if !(step > 0.0) {
        return Err(GraphError::BadStep(step));
    }
    let (kind, slot_idx) = graph
        .slot_of(target)
        .ok_or(GraphError::UnknownTarget(target))?;

    // Analytic gradient on a derived graph.
    let mut g = graph.clone();
    let grads = g.grad_scalar(root, &[target])?;
    let grad_node = grads[0];

    fn bind_all<'a>(b: &mut Bindings<'a>, ps: &'a [Tensor], is: &'a [Tensor]) {
        for (i, t) in ps.iter().enumerate() {
            b.bind_param(i, t);
        }
        for (i, t) in is.iter().enumerate() {
            b.bind_input(i, t);
        }
    }

    let analytic = {
        let mut binds = Bindings::for_graph(&g);
        bind_all(&mut binds, params, inputs);
        let mut buf = EvalBuffer::new();
        buf.begin(&g);
        buf.ensure(&g, &binds, grad_node)?;
        buf.value(&g, &binds, grad_node).clone()
    };

    // Finite differences on the original graph.
    let base = match kind {
        SlotKind::Param => params[slot_idx].clone(),
        SlotKind::Input => inputs[slot_idx].clone(),
    };
    let mut buf = EvalBuffer::new();
    let mut eval_at = |perturbed: &Tensor| -> Result<f64, GraphError> {
        let mut binds = Bindings::for_graph(graph);
        bind_all(&mut binds, params, inputs);
        match kind {
            SlotKind::Param => binds.bind_param(slot_idx, perturbed),
            SlotKind::Input => binds.bind_input(slot_idx, perturbed),
        };
        buf.begin(graph);
        buf.ensure(graph, &binds, root)?;
        Ok(buf.value(graph, &binds, root).as_scalar())
    };

    let mut max_rel = 0.0f64;
    let mut work = base.clone();
    for i in 0..base.len() {
        work.data[i] = base.data[i] + step;
        let fp = eval_at(&work)?;
        work.data[i] = base.data[i] - step;
        let fm = eval_at(&work)?;
        work.data[i] = base.data[i];
        let fd = (fp - fm) / (2.0 * step);
        let an = analytic.data[i];
        let denom = an.abs().max(fd.abs()).max(0.01);
        max_rel = max_rel.max((an - fd).abs() / denom);
    }
    Ok(max_rel)
}
