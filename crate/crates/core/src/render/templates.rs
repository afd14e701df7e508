//! Reusable per-ray expression templates.
//!
//! A template is built once per run and evaluated thousands of times with
//! fresh input bindings, so per-step work is pure numeric evaluation. Each
//! template also carries its gradient section, emitted once at build time:
//! photometric templates expose d(loss)/d(params); shaping-target templates
//! expose the vector-Jacobian product of their target against a cotangent
//! input, which the training loop seeds with the InfoNCE gradient.

use crate::autodiff::{Bindings, EvalBuffer, ExprGraph, NodeId};
use crate::field::{
    self, declare_params, encode_position, sdf_batch, sdf_point, FieldConfig, FieldParams,
};
use crate::render::{compose_weights, Ray, RaySampleSet, RenderError};
use crate::tensor::{Shape, Tensor};

/// Bound on section opacity inside graphs; keeps log(1 - alpha) finite while
/// changing nothing for any non-saturated section.
pub const ALPHA_CAP: f64 = 1.0 - 1e-9;

/// Threshold below which a ray is flagged as carrying no weight.
pub const ZERO_WEIGHT_EPS: f64 = 1e-6;

struct RayCore {
    f: NodeId,
    feat: NodeId,
    x_mat: NodeId,
    alphas: NodeId,
    weights: NodeId,
    wsum: NodeId,
}

/// Shared per-ray chain: sample positions as matrix columns, batched trunk,
/// section opacities, and log-space transmittance weights.
fn build_ray_core(
    g: &mut ExprGraph,
    cfg: &FieldConfig,
    slots: &field::FieldSlots,
    o: NodeId,
    v: NodeId,
    t: NodeId,
    n: usize,
) -> RayCore {
    let ones = g.constant(Tensor::ones(Shape::Vector(n)));
    let xo = g.outer(o, ones);
    let xv = g.outer(v, t);
    let x_mat = g.add(xo, xv);
    let (f, feat) = sdf_batch(g, cfg, slots, x_mat);
    let s = field::sharpness(g, slots);
    let fs = g.slice(f, 0, n - 1);
    let fe = g.slice(f, 1, n - 1);
    let alphas = field::alpha_from_sdf_graph(g, fs, fe, s, ALPHA_CAP);
    let one = g.scalar(1.0);
    let om = g.sub(one, alphas);
    let logom = g.log(om);
    let cum = g.cumsum_exclusive(logom);
    let trans = g.exp(cum);
    let weights = g.mul(trans, alphas);
    let wsum = g.sum(weights);
    RayCore { f, feat, x_mat, alphas, weights, wsum }
}

/// Rendering template: color compositing plus the photometric loss and its
/// parameter gradients.
pub struct RenderTemplate {
    pub graph: ExprGraph,
    pub n: usize,
    pub in_o: usize,
    pub in_v: usize,
    pub in_t: usize,
    pub in_gt: usize,
    pub rgb: NodeId,
    pub f: NodeId,
    pub alphas: NodeId,
    pub weights: NodeId,
    pub wsum: NodeId,
    pub l1: NodeId,
    pub grads: Vec<NodeId>,
}

impl RenderTemplate {
    pub fn build(cfg: &FieldConfig, n: usize) -> Self {
        let mut g = ExprGraph::new();
        let slots = declare_params(&mut g, cfg);
        let o = g.input("o", Shape::Vector(3));
        let v = g.input("v", Shape::Vector(3));
        let t = g.input("t", Shape::Vector(n));
        let gt = g.input("gt", Shape::Vector(3));
        let core = build_ray_core(&mut g, cfg, &slots, o, v, t, n);

        let ve = encode_position(&mut g, v, cfg.pe_dir);
        let ones = g.constant(Tensor::ones(Shape::Vector(n)));
        let ve_b = g.outer(ve, ones);
        let colors = field::color_head_batch(&mut g, cfg, &slots, core.x_mat, ve_b, core.feat);
        let zero = g.constant(Tensor::zeros(Shape::Vector(1)));
        let wp = g.concat(&[core.weights, zero]);
        let rgb = g.matvec(colors, wp, false);

        let diff = g.sub(rgb, gt);
        let ad = g.abs(diff);
        let sum = g.sum(ad);
        let l1 = g.scale(sum, 1.0 / 3.0);

        let all: Vec<NodeId> = slots.all.clone();
        let grads = g.grad_scalar(l1, &all).unwrap();

        RenderTemplate {
            in_o: g.slot_of(o).unwrap().1,
            in_v: g.slot_of(v).unwrap().1,
            in_t: g.slot_of(t).unwrap().1,
            in_gt: g.slot_of(gt).unwrap().1,
            graph: g,
            n,
            rgb,
            f: core.f,
            alphas: core.alphas,
            weights: core.weights,
            wsum: core.wsum,
            l1,
            grads,
        }
    }
}

/// What a shaping-target template aggregates along the ray.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetKind {
    /// Eq-9 style aggregation of per-sample normal parameter-Jacobians,
    /// restricted to `jac_samples` caller-selected sections.
    NormalJacobian { jac_samples: usize },
    /// Parameter gradient of the rendered SDF value sum(w_i f_i).
    SdfJacobian,
    /// Concatenated parameter gradients of the rendered color channels.
    ColorJacobian,
    /// The rendered (weight-averaged) normal itself, a 3-vector.
    RenderedNormal,
}

/// Template producing one vector per ray (the shaping target) plus the VJP
/// of that vector against a cotangent input, with respect to all parameters.
pub struct TargetTemplate {
    pub graph: ExprGraph,
    pub kind: TargetKind,
    pub n: usize,
    /// Output dimension of the target vector.
    pub dim: usize,
    pub in_o: usize,
    pub in_v: usize,
    pub in_t: usize,
    /// Selected section t-values (NormalJacobian only).
    pub in_tsel: Option<usize>,
    /// One-hot section masks (NormalJacobian only).
    pub in_masks: Vec<usize>,
    pub in_cot: usize,
    pub target: NodeId,
    pub wsum: NodeId,
    pub vjp_grads: Vec<NodeId>,
}

impl TargetTemplate {
    /// `theta_d` lists canonical parameter-slot indices making up the
    /// shapeable subset, in concatenation order.
    pub fn build(cfg: &FieldConfig, kind: TargetKind, n: usize, theta_d: &[usize]) -> Self {
        let mut g = ExprGraph::new();
        let slots = declare_params(&mut g, cfg);
        let o = g.input("o", Shape::Vector(3));
        let v = g.input("v", Shape::Vector(3));
        let t = g.input("t", Shape::Vector(n));
        let core = build_ray_core(&mut g, cfg, &slots, o, v, t, n);
        let theta_nodes: Vec<NodeId> = theta_d.iter().map(|&i| slots.all[i]).collect();

        let mut in_tsel = None;
        let mut in_masks = Vec::new();
        let target = match kind {
            TargetKind::NormalJacobian { jac_samples } => {
                let k = jac_samples;
                let tsel = g.input("tsel", Shape::Vector(k));
                in_tsel = Some(g.slot_of(tsel).unwrap().1);
                let mut acc: Option<NodeId> = None;
                for m in 0..k {
                    let mask = g.input(&format!("mask{m}"), Shape::Vector(n - 1));
                    in_masks.push(g.slot_of(mask).unwrap().1);
                    let w_m = g.dot(core.weights, mask);
                    let t_m = {
                        let s = g.slice(tsel, m, 1);
                        g.reshape(s, Shape::Scalar)
                    };
                    let step = g.mul(v, t_m);
                    let x_m = g.add(o, step);
                    let (f_m, _) = sdf_point(&mut g, cfg, &slots, x_m);
                    let normal = g.grad_scalar(f_m, &[x_m]).unwrap()[0];
                    let mut axis_parts = Vec::new();
                    for axis in 0..3 {
                        let nk = g.slice(normal, axis, 1);
                        let nk = g.reshape(nk, Shape::Scalar);
                        let jac = g.grad_scalar(nk, &theta_nodes).unwrap();
                        for (ji, &p) in jac.iter().zip(theta_d.iter()) {
                            let len = g.node_shape(slots.all[p]).len();
                            let flat = g.reshape(*ji, Shape::Vector(len));
                            axis_parts.push(flat);
                        }
                    }
                    let concat = g.concat(&axis_parts);
                    let scaled = g.mul(concat, w_m);
                    acc = Some(match acc {
                        None => scaled,
                        Some(prev) => g.add(prev, scaled),
                    });
                }
                acc.expect("jac_samples >= 1")
            }
            TargetKind::SdfJacobian => {
                let fs = g.slice(core.f, 0, n - 1);
                let rendered_sdf = g.dot(core.weights, fs);
                let jac = g.grad_scalar(rendered_sdf, &theta_nodes).unwrap();
                let parts: Vec<NodeId> = jac
                    .iter()
                    .map(|&j| {
                        let len = g.node_shape(j).len();
                        g.reshape(j, Shape::Vector(len))
                    })
                    .collect();
                g.concat(&parts)
            }
            TargetKind::ColorJacobian => {
                let ve = encode_position(&mut g, v, cfg.pe_dir);
                let ones = g.constant(Tensor::ones(Shape::Vector(n)));
                let ve_b = g.outer(ve, ones);
                let colors = field::color_head_batch(&mut g, cfg, &slots, core.x_mat, ve_b, core.feat);
                let zero = g.constant(Tensor::zeros(Shape::Vector(1)));
                let wp = g.concat(&[core.weights, zero]);
                let rgb = g.matvec(colors, wp, false);
                let mut parts = Vec::new();
                for ch in 0..3 {
                    let c = g.slice(rgb, ch, 1);
                    let c = g.reshape(c, Shape::Scalar);
                    let jac = g.grad_scalar(c, &theta_nodes).unwrap();
                    for &j in &jac {
                        let len = g.node_shape(j).len();
                        parts.push(g.reshape(j, Shape::Vector(len)));
                    }
                }
                g.concat(&parts)
            }
            TargetKind::RenderedNormal => {
                let fsum = g.sum(core.f);
                // Columns are independent, so the adjoint of the position
                // matrix holds one normal per sample.
                let normals = g.grad_scalar(fsum, &[core.x_mat]).unwrap()[0];
                let zero = g.constant(Tensor::zeros(Shape::Vector(1)));
                let wp = g.concat(&[core.weights, zero]);
                g.matvec(normals, wp, false)
            }
        };

        let dim = g.node_shape(target).len();
        let cot = g.input("cot", Shape::Vector(dim));
        let seed = g.dot(target, cot);
        let vjp_grads = g.grad_scalar(seed, &slots.all).unwrap();

        TargetTemplate {
            in_o: g.slot_of(o).unwrap().1,
            in_v: g.slot_of(v).unwrap().1,
            in_t: g.slot_of(t).unwrap().1,
            in_cot: g.slot_of(cot).unwrap().1,
            graph: g,
            kind,
            n,
            dim,
            in_tsel,
            in_masks,
            target,
            wsum: core.wsum,
            vjp_grads,
        }
    }
}

/// Eikonal template over a fixed-size batch of points.
pub struct EikonalTemplate {
    pub graph: ExprGraph,
    pub m: usize,
    pub in_x: usize,
    pub loss: NodeId,
    pub grads: Vec<NodeId>,
}

impl EikonalTemplate {
    pub fn build(cfg: &FieldConfig, m: usize) -> Self {
        let mut g = ExprGraph::new();
        let slots = declare_params(&mut g, cfg);
        let x = g.input("x", Shape::Matrix(3, m));
        let (f, _) = sdf_batch(&mut g, cfg, &slots, x);
        let fsum = g.sum(f);
        let grads_x = g.grad_scalar(fsum, &[x]).unwrap()[0];
        let g2 = g.mul(grads_x, grads_x);
        let sq = g.col_sum(g2);
        let norms = g.sqrt(sq);
        let one = g.scalar(1.0);
        let d = g.sub(norms, one);
        let dd = g.mul(d, d);
        let total = g.sum(dd);
        let loss = g.scale(total, 1.0 / m as f64);
        let grads = g.grad_scalar(loss, &slots.all).unwrap();
        EikonalTemplate {
            in_x: g.slot_of(x).unwrap().1,
            graph: g,
            m,
            loss,
            grads,
        }
    }
}

/// Evaluator owning a render template, its workspace, and reusable input
/// tensors.
pub struct RenderEvaluator {
    pub tmpl: RenderTemplate,
    buf: EvalBuffer,
    o: Tensor,
    v: Tensor,
    t: Tensor,
    gt: Tensor,
}

impl RenderEvaluator {
    pub fn new(cfg: &FieldConfig, n: usize) -> Self {
        let tmpl = RenderTemplate::build(cfg, n);
        RenderEvaluator {
            buf: EvalBuffer::new(),
            o: Tensor::zeros(Shape::Vector(3)),
            v: Tensor::zeros(Shape::Vector(3)),
            t: Tensor::zeros(Shape::Vector(n)),
            gt: Tensor::zeros(Shape::Vector(3)),
            tmpl,
        }
    }

    fn set_ray(&mut self, ray: &Ray, ts: &[f64]) {
        assert_eq!(ts.len(), self.tmpl.n, "template built for {} samples", self.tmpl.n);
        self.o.data.copy_from_slice(&ray.origin);
        self.v.data.copy_from_slice(&ray.dir);
        self.t.data.copy_from_slice(ts);
    }

    /// Volume-render one ray: the composited color plus the sample set with
    /// exact (sequential-product) weights.
    pub fn render(
        &mut self,
        params: &FieldParams,
        ray: &Ray,
        ts: &[f64],
    ) -> Result<([f64; 3], RaySampleSet), RenderError> {
        self.set_ray(ray, ts);
        let binds = render_binds(&self.tmpl, params, &self.o, &self.v, &self.t, &self.gt);
        let graph_ptr = &self.tmpl.graph;
        self.buf.begin(graph_ptr);
        self.buf.ensure(graph_ptr, &binds, self.tmpl.rgb).map_err(FieldErrorFrom::wrap)?;
        self.buf.ensure(graph_ptr, &binds, self.tmpl.f).map_err(FieldErrorFrom::wrap)?;
        let rgb_t = self.buf.value(graph_ptr, &binds, self.tmpl.rgb);
        let rgb = [rgb_t.data[0], rgb_t.data[1], rgb_t.data[2]];
        let f = self.buf.value(graph_ptr, &binds, self.tmpl.f).data.clone();
        let s = params.sharpness();
        let alphas: Vec<f64> = (0..ts.len() - 1)
            .map(|i| field::alpha_from_sdf(f[i], f[i + 1], s))
            .collect();
        let weights = compose_weights(&alphas);
        let deltas: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
        Ok((
            rgb,
            RaySampleSet {
                origin: ray.origin,
                dir: ray.dir,
                ts: ts.to_vec(),
                deltas,
                alphas,
                weights,
            },
        ))
    }

    /// Photometric L1 of one ray and its parameter gradients, accumulated
    /// into `acc` with factor `scale`.
    pub fn loss_and_grads_into(
        &mut self,
        params: &FieldParams,
        ray: &Ray,
        ts: &[f64],
        gt: [f64; 3],
        scale: f64,
        acc: &mut [Tensor],
    ) -> Result<f64, RenderError> {
        self.set_ray(ray, ts);
        self.gt.data.copy_from_slice(&gt);
        let binds = render_binds(&self.tmpl, params, &self.o, &self.v, &self.t, &self.gt);
        let graph = &self.tmpl.graph;
        self.buf.begin(graph);
        self.buf.ensure(graph, &binds, self.tmpl.l1).map_err(FieldErrorFrom::wrap)?;
        let l1 = self.buf.value(graph, &binds, self.tmpl.l1).as_scalar();
        for (i, &gr) in self.tmpl.grads.iter().enumerate() {
            self.buf.ensure(graph, &binds, gr).map_err(FieldErrorFrom::wrap)?;
            let gv = self.buf.value(graph, &binds, gr);
            crate::tensor::axpy(&mut acc[i], scale, gv);
        }
        Ok(l1)
    }
}

/// Evaluator for a shaping-target template. Two-phase use per ray: `target`
/// computes the per-ray vector; `vjp_into` then reuses every cached forward
/// value to accumulate parameter gradients against a cotangent.
pub struct TargetEvaluator {
    pub tmpl: TargetTemplate,
    buf: EvalBuffer,
    o: Tensor,
    v: Tensor,
    t: Tensor,
    tsel: Tensor,
    masks: Vec<Tensor>,
    cot: Tensor,
}

impl TargetEvaluator {
    pub fn new(cfg: &FieldConfig, kind: TargetKind, n: usize, theta_d: &[usize]) -> Self {
        let tmpl = TargetTemplate::build(cfg, kind, n, theta_d);
        let k = tmpl.in_masks.len();
        TargetEvaluator {
            buf: EvalBuffer::new(),
            o: Tensor::zeros(Shape::Vector(3)),
            v: Tensor::zeros(Shape::Vector(3)),
            t: Tensor::zeros(Shape::Vector(n)),
            tsel: Tensor::zeros(Shape::Vector(k.max(1))),
            masks: vec![Tensor::zeros(Shape::Vector(n - 1)); k],
            cot: Tensor::zeros(Shape::Vector(tmpl.dim)),
            tmpl,
        }
    }

    pub fn dim(&self) -> usize {
        self.tmpl.dim
    }

    /// Phase 1: evaluate the shaping target for one ray. For the
    /// normal-Jacobian kind, `selection` lists the section indices whose
    /// Jacobians enter the aggregation (callers pick the top-weight
    /// sections); other kinds ignore it. Returns the weight sum.
    pub fn target(
        &mut self,
        params: &FieldParams,
        ray: &Ray,
        ts: &[f64],
        selection: &[usize],
        out: &mut Vec<f64>,
    ) -> Result<f64, RenderError> {
        assert_eq!(ts.len(), self.tmpl.n);
        self.o.data.copy_from_slice(&ray.origin);
        self.v.data.copy_from_slice(&ray.dir);
        self.t.data.copy_from_slice(ts);
        if self.tmpl.in_tsel.is_some() {
            let k = self.masks.len();
            assert_eq!(selection.len(), k, "selection must match template jac_samples");
            for (m, &sec) in selection.iter().enumerate() {
                assert!(sec < self.tmpl.n - 1, "selected section out of range");
                self.tsel.data[m] = ts[sec];
                self.masks[m].data.iter_mut().for_each(|v| *v = 0.0);
                self.masks[m].data[sec] = 1.0;
            }
        }
        let binds = target_binds(&self.tmpl, params, &self.o, &self.v, &self.t, &self.tsel, &self.masks, &self.cot);
        let graph = &self.tmpl.graph;
        self.buf.begin(graph);
        self.buf.ensure(graph, &binds, self.tmpl.target).map_err(FieldErrorFrom::wrap)?;
        self.buf.ensure(graph, &binds, self.tmpl.wsum).map_err(FieldErrorFrom::wrap)?;
        let tv = self.buf.value(graph, &binds, self.tmpl.target);
        out.clear();
        out.extend_from_slice(&tv.data);
        Ok(self.buf.value(graph, &binds, self.tmpl.wsum).as_scalar())
    }

    /// Phase 2: accumulate scale * d(cot . target)/d(params) into `acc`.
    /// Must follow a `target` call for the same ray and parameters.
    pub fn vjp_into(
        &mut self,
        params: &FieldParams,
        cot: &[f64],
        scale: f64,
        acc: &mut [Tensor],
    ) -> Result<(), RenderError> {
        assert_eq!(cot.len(), self.tmpl.dim);
        self.cot.data.copy_from_slice(cot);
        let binds = target_binds(&self.tmpl, params, &self.o, &self.v, &self.t, &self.tsel, &self.masks, &self.cot);
        let graph = &self.tmpl.graph;
        for (i, &gr) in self.tmpl.vjp_grads.iter().enumerate() {
            self.buf.ensure(graph, &binds, gr).map_err(FieldErrorFrom::wrap)?;
            let gv = self.buf.value(graph, &binds, gr);
            crate::tensor::axpy(&mut acc[i], scale, gv);
        }
        Ok(())
    }
}

pub struct EikonalEvaluator {
    pub tmpl: EikonalTemplate,
    buf: EvalBuffer,
    x: Tensor,
}

impl EikonalEvaluator {
    pub fn new(cfg: &FieldConfig, m: usize) -> Self {
        let tmpl = EikonalTemplate::build(cfg, m);
        EikonalEvaluator { buf: EvalBuffer::new(), x: Tensor::zeros(Shape::Matrix(3, m)), tmpl }
    }

    /// Eikonal loss over exactly `m` points plus gradient accumulation.
    pub fn loss_and_grads_into(
        &mut self,
        params: &FieldParams,
        points: &[[f64; 3]],
        scale: f64,
        acc: &mut [Tensor],
    ) -> Result<f64, RenderError> {
        let m = self.tmpl.m;
        assert_eq!(points.len(), m);
        for (j, p) in points.iter().enumerate() {
            self.x.data[j] = p[0];
            self.x.data[m + j] = p[1];
            self.x.data[2 * m + j] = p[2];
        }
        let mut binds = Bindings::for_graph(&self.tmpl.graph);
        params.bind_into(&mut binds);
        binds.bind_input(self.tmpl.in_x, &self.x);
        let graph = &self.tmpl.graph;
        self.buf.begin(graph);
        self.buf.ensure(graph, &binds, self.tmpl.loss).map_err(FieldErrorFrom::wrap)?;
        let loss = self.buf.value(graph, &binds, self.tmpl.loss).as_scalar();
        for (i, &gr) in self.tmpl.grads.iter().enumerate() {
            self.buf.ensure(graph, &binds, gr).map_err(FieldErrorFrom::wrap)?;
            let gv = self.buf.value(graph, &binds, gr);
            crate::tensor::axpy(&mut acc[i], scale, gv);
        }
        Ok(loss)
    }
}

/// Numeric entry point for the ray-aggregated normal Jacobian with full
/// per-section aggregation (every section contributes).
pub fn aggregate_normal_jacobian(
    params: &FieldParams,
    ray: &Ray,
    ts: &[f64],
    theta_d: &[usize],
) -> Result<crate::render::NormalJacobian, RenderError> {
    let n = ts.len();
    let mut ev = TargetEvaluator::new(
        &params.cfg,
        TargetKind::NormalJacobian { jac_samples: n - 1 },
        n,
        theta_d,
    );
    let selection: Vec<usize> = (0..n - 1).collect();
    let mut values = Vec::new();
    let wsum = ev.target(params, ray, ts, &selection, &mut values)?;
    Ok(crate::render::NormalJacobian { values, total_weight: wsum })
}


fn render_binds<'a>(
    tmpl: &'a RenderTemplate,
    params: &'a FieldParams,
    o: &'a Tensor,
    v: &'a Tensor,
    t: &'a Tensor,
    gt: &'a Tensor,
) -> Bindings<'a> {
    let mut b = Bindings::for_graph(&tmpl.graph);
    params.bind_into(&mut b);
    b.bind_input(tmpl.in_o, o)
        .bind_input(tmpl.in_v, v)
        .bind_input(tmpl.in_t, t)
        .bind_input(tmpl.in_gt, gt);
    b
}

#[allow(clippy::too_many_arguments)]
fn target_binds<'a>(
    tmpl: &'a TargetTemplate,
    params: &'a FieldParams,
    o: &'a Tensor,
    v: &'a Tensor,
    t: &'a Tensor,
    tsel: &'a Tensor,
    masks: &'a [Tensor],
    cot: &'a Tensor,
) -> Bindings<'a> {
    let mut b = Bindings::for_graph(&tmpl.graph);
    params.bind_into(&mut b);
    b.bind_input(tmpl.in_o, o)
        .bind_input(tmpl.in_v, v)
        .bind_input(tmpl.in_t, t)
        .bind_input(tmpl.in_cot, cot);
    if let Some(i) = tmpl.in_tsel {
        b.bind_input(i, tsel);
    }
    for (i, m) in tmpl.in_masks.iter().zip(masks) {
        b.bind_input(*i, m);
    }
    b
}

/// Adapter so `?` flows graph errors through RenderError via FieldError.
struct FieldErrorFrom;

impl FieldErrorFrom {
    fn wrap(e: crate::autodiff::GraphError) -> RenderError {
        RenderError::Field(crate::field::FieldError::Graph(e))
    }
}
