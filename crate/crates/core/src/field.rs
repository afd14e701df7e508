//! The neural scene representation: an SDF trunk with positional encoding, a
//! view-dependent color head, surface normals as input-gradients, and the
//! logistic section-opacity conversion.
//!
//! Graph builders come in two forms: single-point (vectors) and batched
//! (points as matrix columns). Both declare parameter slots in one canonical
//! order so a [`FieldParams`] binds to any of them by index.

use crate::autodiff::{Bindings, EvalBuffer, ExprGraph, GraphError, NodeId};
use crate::io::{self, FormatError};
use crate::tensor::{Shape, Tensor};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite activation in layer `{layer}`")]
    NonFinite { layer: String },
    #[error("direction is not unit length (|v| = {norm})")]
    NonUnitDirection { norm: f64 },
    #[error("no parameter named `{0}`")]
    UnknownLayer(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Architecture and initialization settings for the field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    /// Positional-encoding frequency count for positions.
    pub pe_pos: usize,
    /// Positional-encoding frequency count for view directions.
    pub pe_dir: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub color_layers: usize,
    pub color_width: usize,
    pub softplus_beta: f64,
    /// Radius of the sphere targeted by geometric initialization.
    pub init_radius: f64,
    /// Initial opacity sharpness s (stored as log s).
    pub init_sharpness: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            pe_pos: 6,
            pe_dir: 4,
            trunk_layers: 4,
            trunk_width: 64,
            color_layers: 2,
            color_width: 64,
            softplus_beta: 100.0,
            init_radius: 0.5,
            init_sharpness: 20.0,
        }
    }
}

impl FieldConfig {
    pub fn pos_encoded_dim(&self) -> usize {
        3 + 6 * self.pe_pos
    }

    pub fn dir_encoded_dim(&self) -> usize {
        3 + 6 * self.pe_dir
    }

    /// Color head input: raw position, encoded direction, trunk features.
    pub fn color_input_dim(&self) -> usize {
        3 + self.dir_encoded_dim() + self.trunk_width
    }

    fn meta(&self) -> Tensor {
        Tensor::vector(vec![
            self.pe_pos as f64,
            self.pe_dir as f64,
            self.trunk_layers as f64,
            self.trunk_width as f64,
            self.color_layers as f64,
            self.color_width as f64,
            self.softplus_beta,
            self.init_radius,
            self.init_sharpness,
        ])
    }

    fn from_meta(t: &Tensor) -> Option<Self> {
        if t.len() != 9 {
            return None;
        }
        Some(FieldConfig {
            pe_pos: t.data[0] as usize,
            pe_dir: t.data[1] as usize,
            trunk_layers: t.data[2] as usize,
            trunk_width: t.data[3] as usize,
            color_layers: t.data[4] as usize,
            color_width: t.data[5] as usize,
            softplus_beta: t.data[6],
            init_radius: t.data[7],
            init_sharpness: t.data[8],
        })
    }
}

/// Shape and name of every parameter, in canonical slot order.
pub fn param_layout(cfg: &FieldConfig) -> Vec<(String, Shape)> {
    let mut out = Vec::new();
    let mut in_dim = cfg.pos_encoded_dim();
    for l in 0..cfg.trunk_layers {
        out.push((format!("trunk.{l}.w"), Shape::Matrix(cfg.trunk_width, in_dim)));
        out.push((format!("trunk.{l}.b"), Shape::Vector(cfg.trunk_width)));
        in_dim = cfg.trunk_width;
    }
    out.push(("sdf.w".to_string(), Shape::Matrix(1, cfg.trunk_width)));
    out.push(("sdf.b".to_string(), Shape::Scalar));
    let mut cin = cfg.color_input_dim();
    for l in 0..cfg.color_layers {
        out.push((format!("color.{l}.w"), Shape::Matrix(cfg.color_width, cin)));
        out.push((format!("color.{l}.b"), Shape::Vector(cfg.color_width)));
        cin = cfg.color_width;
    }
    let lout = cfg.color_layers;
    out.push((format!("color.{lout}.w"), Shape::Matrix(3, cin)));
    out.push((format!("color.{lout}.b"), Shape::Vector(3)));
    out.push(("log_s".to_string(), Shape::Scalar));
    out
}

/// All trainable tensors of one field, aligned with [`param_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub cfg: FieldConfig,
    pub tensors: Vec<Tensor>,
}

impl FieldParams {
    /// Geometric initialization: the fresh field approximates the signed
    /// distance to a sphere of `cfg.init_radius`.
    ///
    /// Construction: the first trunk layer holds antithetic pairs of
    /// Fibonacci-sphere directions (each pair of centered-softplus units sums
    /// to |u.x|), deeper layers start near the identity so the pattern
    /// survives to the head, and the head averages it into ~|x|. Raw-x
    /// columns only; encoded features start at zero weight. A final
    /// slope/offset calibration of the linear head pins f(0) = -radius and
    /// unit radial slope exactly.
    pub fn init(cfg: &FieldConfig, seed: u64) -> Self {
        let mut p = Self::raw_init(cfg, seed);
        p.calibrate_geometric();
        p
    }

    fn raw_init(cfg: &FieldConfig, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, shape) in param_layout(cfg) {
            let t = match shape {
                Shape::Matrix(rows, cols) => {
                    let mut data = vec![0.0; rows * cols];
                    if name == "sdf.w" {
                        let mean = std::f64::consts::PI.sqrt() / (cols as f64).sqrt();
                        let n = Normal::new(mean, 1e-4).unwrap();
                        for v in data.iter_mut() {
                            *v = n.sample(&mut rng);
                        }
                    } else if name == "trunk.0.w" {
                        // Antithetic pairs of Fibonacci-sphere directions on
                        // the raw coordinates; encoded features start dark.
                        let half = rows / 2;
                        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
                        for r in 0..half {
                            let z = 1.0 - 2.0 * (r as f64 + 0.5) / half as f64;
                            let rad = (1.0 - z * z).max(0.0).sqrt();
                            let th = golden * r as f64;
                            let u = [rad * th.cos(), rad * th.sin(), z];
                            for c in 0..3 {
                                data[r * cols + c] = u[c];
                                data[(r + half) * cols + c] = -u[c];
                            }
                        }
                        if rows % 2 == 1 {
                            data[(rows - 1) * cols] = 1.0;
                        }
                    } else if name.starts_with("trunk.") {
                        // Near-identity mixing keeps the first layer's
                        // distance pattern intact while breaking symmetry.
                        let n = Normal::new(0.0, 0.2 / (rows as f64).sqrt()).unwrap();
                        for v in data.iter_mut() {
                            *v = n.sample(&mut rng);
                        }
                        for r in 0..rows.min(cols) {
                            data[r * cols + r] += 1.0;
                        }
                    } else {
                        let std = (2.0f64).sqrt() / (rows as f64).sqrt();
                        let last_color = format!("color.{}.w", cfg.color_layers);
                        let std = if name == last_color { 0.1 } else { std };
                        let n = Normal::new(0.0, std).unwrap();
                        for v in data.iter_mut() {
                            *v = n.sample(&mut rng);
                        }
                    }
                    Tensor::matrix(rows, cols, data)
                }
                Shape::Vector(n) => Tensor::zeros(Shape::Vector(n)),
                Shape::Scalar => {
                    if name == "sdf.b" {
                        Tensor::scalar(-cfg.init_radius)
                    } else if name == "log_s" {
                        Tensor::scalar(cfg.init_sharpness.ln())
                    } else {
                        Tensor::scalar(0.0)
                    }
                }
            };
            tensors.push(t);
        }
        FieldParams { cfg: cfg.clone(), tensors }
    }

    /// Rescale the SDF head so the freshly initialized field has unit radial
    /// slope and value -init_radius at the origin, measured on 26 fixed
    /// probe directions. The head is linear in its weights, so this is an
    /// exact affine correction of the init, not training.
    fn calibrate_geometric(&mut self) {
        let r = self.cfg.init_radius;
        let mut ev = FieldEval::new(&self.cfg);
        let f0 = ev.sdf(self, [0.0, 0.0, 0.0]).expect("fresh field is finite");
        let mut dirs = Vec::new();
        for dx in -1i32..=1 {
            for dy in -1i32..=1 {
                for dz in -1i32..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let n = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    dirs.push([dx as f64 / n, dy as f64 / n, dz as f64 / n]);
                }
            }
        }
        let mut mean_fr = 0.0;
        for d in &dirs {
            let x = [d[0] * r, d[1] * r, d[2] * r];
            mean_fr += ev.sdf(self, x).expect("fresh field is finite");
        }
        mean_fr /= dirs.len() as f64;
        let slope = (mean_fr - f0) / r;
        if !(slope.is_finite() && slope > 0.05) {
            return;
        }
        let w_idx = self.index_of("sdf.w").unwrap();
        let b_idx = self.index_of("sdf.b").unwrap();
        let b_old = self.tensors[b_idx].as_scalar();
        for v in self.tensors[w_idx].data.iter_mut() {
            *v /= slope;
        }
        // New bias makes f(0) exactly -r after the rescale.
        let b_new = -r - (f0 - b_old) / slope;
        self.tensors[b_idx] = Tensor::scalar(b_new);
    }

    pub fn names(&self) -> Vec<String> {
        param_layout(&self.cfg).into_iter().map(|(n, _)| n).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize, FieldError> {
        param_layout(&self.cfg)
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| FieldError::UnknownLayer(name.to_string()))
    }

    /// Current opacity sharpness s = exp(log_s).
    pub fn sharpness(&self) -> f64 {
        self.tensors.last().unwrap().as_scalar().exp()
    }

    pub fn bind_into<'a>(&'a self, binds: &mut Bindings<'a>) {
        for (i, t) in self.tensors.iter().enumerate() {
            binds.bind_param(i, t);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), FieldError> {
        let mut entries = vec![("meta.field".to_string(), self.cfg.meta())];
        for (name, t) in self.names().into_iter().zip(self.tensors.iter()) {
            entries.push((name, t.clone()));
        }
        io::save_container(path, &entries)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FieldError> {
        let entries = io::load_container(path)?;
        Self::from_entries(&entries)
    }

    /// Rebuild from container entries (extra entries, e.g. optimizer state,
    /// are ignored).
    pub fn from_entries(entries: &[(String, Tensor)]) -> Result<Self, FieldError> {
        let meta = entries
            .iter()
            .find(|(n, _)| n == "meta.field")
            .ok_or_else(|| FieldError::ConfigMismatch("missing meta.field entry".into()))?;
        let cfg = FieldConfig::from_meta(&meta.1)
            .ok_or_else(|| FieldError::ConfigMismatch("bad meta.field entry".into()))?;
        let mut tensors = Vec::new();
        for (name, shape) in param_layout(&cfg) {
            let found = entries
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| FieldError::ConfigMismatch(format!("missing `{name}`")))?;
            if found.1.shape != shape {
                return Err(FieldError::ConfigMismatch(format!(
                    "`{name}` has shape {}, expected {shape}",
                    found.1.shape
                )));
            }
            tensors.push(found.1.clone());
        }
        Ok(FieldParams { cfg, tensors })
    }
}

/// Node ids of the declared parameter slots inside one graph.
#[derive(Debug, Clone)]
pub struct FieldSlots {
    pub trunk: Vec<(NodeId, NodeId)>,
    pub sdf: (NodeId, NodeId),
    pub color: Vec<(NodeId, NodeId)>,
    pub log_s: NodeId,
    /// Every parameter node in canonical slot order.
    pub all: Vec<NodeId>,
}

/// Declare every field parameter slot in canonical order.
pub fn declare_params(g: &mut ExprGraph, cfg: &FieldConfig) -> FieldSlots {
    let mut trunk = Vec::new();
    let mut color = Vec::new();
    let mut sdf = (0, 0);
    let mut log_s = 0;
    let mut all = Vec::new();
    for (name, shape) in param_layout(cfg) {
        let id = g.param(&name, shape);
        all.push(id);
        if name.starts_with("trunk.") {
            if name.ends_with(".w") {
                trunk.push((id, 0));
            } else {
                trunk.last_mut().unwrap().1 = id;
            }
        } else if name == "sdf.w" {
            sdf.0 = id;
        } else if name == "sdf.b" {
            sdf.1 = id;
        } else if name.starts_with("color.") {
            if name.ends_with(".w") {
                color.push((id, 0));
            } else {
                color.last_mut().unwrap().1 = id;
            }
        } else if name == "log_s" {
            log_s = id;
        }
    }
    FieldSlots { trunk, sdf, color, log_s, all }
}

/// sin/cos positional encoding of a 3-vector: [x, sin(2^l pi x), cos(2^l pi x)].
pub fn encode_position(g: &mut ExprGraph, x: NodeId, freqs: usize) -> NodeId {
    let mut parts = vec![x];
    for l in 0..freqs {
        let f = std::f64::consts::PI * (1u64 << l) as f64;
        let s = g.scale(x, f);
        parts.push(g.sin(s));
        parts.push(g.cos(s));
    }
    g.concat(&parts)
}

/// Batched variant: columns are points, rows are encoded features.
pub fn encode_position_batch(g: &mut ExprGraph, x: NodeId, freqs: usize) -> NodeId {
    let mut parts = vec![x];
    for l in 0..freqs {
        let f = std::f64::consts::PI * (1u64 << l) as f64;
        let s = g.scale(x, f);
        parts.push(g.sin(s));
        parts.push(g.cos(s));
    }
    g.concat_rows(&parts)
}

/// Trunk activation: softplus centered so a zero pre-activation contributes
/// nothing. The uncentered floor ln(2)/beta accumulates across layers and
/// biases the geometric initialization away from its target sphere.
fn trunk_activation(g: &mut ExprGraph, a: NodeId, beta: f64) -> NodeId {
    let sp = g.softplus(a, beta);
    let shift = g.scalar(-std::f64::consts::LN_2 / beta);
    g.add(sp, shift)
}

/// SDF trunk on a single encoded point; returns the feature vector.
pub fn trunk(g: &mut ExprGraph, cfg: &FieldConfig, slots: &FieldSlots, encoded: NodeId) -> NodeId {
    let mut h = encoded;
    for &(w, b) in &slots.trunk {
        let a = g.affine(w, h, b);
        h = trunk_activation(g, a, cfg.softplus_beta);
    }
    h
}

pub fn trunk_batch(g: &mut ExprGraph, cfg: &FieldConfig, slots: &FieldSlots, encoded: NodeId) -> NodeId {
    let mut h = encoded;
    for &(w, b) in &slots.trunk {
        let m = g.matmul(w, h, false, false);
        let a = g.add_col_vec(m, b);
        h = trunk_activation(g, a, cfg.softplus_beta);
    }
    h
}

/// Scalar SDF value from trunk features.
pub fn sdf_head(g: &mut ExprGraph, slots: &FieldSlots, feat: NodeId) -> NodeId {
    let (w, b) = slots.sdf;
    let mv = g.matvec(w, feat, false);
    let v = g.reshape(mv, Shape::Scalar);
    g.add(v, b)
}

/// SDF values for a feature matrix, one per column.
pub fn sdf_head_batch(g: &mut ExprGraph, slots: &FieldSlots, feat: NodeId) -> NodeId {
    let (w, b) = slots.sdf;
    let n = match g.node_shape(feat) {
        Shape::Matrix(_, n) => n,
        s => panic!("sdf_head_batch: expected matrix features, got {s}"),
    };
    let m = g.matmul(w, feat, false, false);
    let v = g.reshape(m, Shape::Vector(n));
    g.add(v, b)
}

/// Full single-point SDF: encode, trunk, head. Returns (sdf, features).
pub fn sdf_point(g: &mut ExprGraph, cfg: &FieldConfig, slots: &FieldSlots, x: NodeId) -> (NodeId, NodeId) {
    let e = encode_position(g, x, cfg.pe_pos);
    let feat = trunk(g, cfg, slots, e);
    (sdf_head(g, slots, feat), feat)
}

pub fn sdf_batch(g: &mut ExprGraph, cfg: &FieldConfig, slots: &FieldSlots, x: NodeId) -> (NodeId, NodeId) {
    let e = encode_position_batch(g, x, cfg.pe_pos);
    let feat = trunk_batch(g, cfg, slots, e);
    (sdf_head_batch(g, slots, feat), feat)
}

/// Color head on a single point: input [x, encoded v, features]; sigmoid rgb.
pub fn color_head(
    g: &mut ExprGraph,
    cfg: &FieldConfig,
    slots: &FieldSlots,
    x: NodeId,
    v: NodeId,
    feat: NodeId,
) -> NodeId {
    let ve = encode_position(g, v, cfg.pe_dir);
    let mut h = g.concat(&[x, ve, feat]);
    for (l, &(w, b)) in slots.color.iter().enumerate() {
        h = g.affine(w, h, b);
        if l + 1 < slots.color.len() {
            h = g.softplus(h, cfg.softplus_beta);
        }
    }
    g.sigmoid(h)
}

/// Batched color head: `x` is 3xN, `ve` the already-encoded direction
/// broadcast to a matrix with N columns, `feat` WxN.
pub fn color_head_batch(
    g: &mut ExprGraph,
    cfg: &FieldConfig,
    slots: &FieldSlots,
    x: NodeId,
    ve: NodeId,
    feat: NodeId,
) -> NodeId {
    let mut h = g.concat_rows(&[x, ve, feat]);
    for (l, &(w, b)) in slots.color.iter().enumerate() {
        let m = g.matmul(w, h, false, false);
        h = g.add_col_vec(m, b);
        if l + 1 < slots.color.len() {
            h = g.softplus(h, cfg.softplus_beta);
        }
    }
    g.sigmoid(h)
}

/// Opacity sharpness node s = exp(log_s); positive by construction.
pub fn sharpness(g: &mut ExprGraph, slots: &FieldSlots) -> NodeId {
    g.exp(slots.log_s)
}

/// Section opacity from consecutive SDF samples: the logistic CDF of
/// sharpness s evaluated at both ends,
/// alpha = max((sig(s f_i) - sig(s f_next)) / sig(s f_i), 0), in [0, 1].
pub fn alpha_from_sdf(f_i: f64, f_next: f64, s: f64) -> f64 {
    fn sig(t: f64) -> f64 {
        if t >= 0.0 {
            1.0 / (1.0 + (-t).exp())
        } else {
            let e = t.exp();
            e / (1.0 + e)
        }
    }
    let a = sig(s * f_i);
    let b = sig(s * f_next);
    (((a - b) / (a + 1e-300)).max(0.0)).clamp(0.0, 1.0)
}

/// Graph form of [`alpha_from_sdf`] over section-start/end SDF vectors.
/// `cap` bounds alpha away from 1 so the log-space transmittance chain stays
/// differentiable; pass 1.0 for the uncapped value.
pub fn alpha_from_sdf_graph(
    g: &mut ExprGraph,
    f_start: NodeId,
    f_end: NodeId,
    s: NodeId,
    cap: f64,
) -> NodeId {
    let sa = g.mul(f_start, s);
    let sb = g.mul(f_end, s);
    let a = g.sigmoid(sa);
    let b = g.sigmoid(sb);
    let num = g.sub(a, b);
    let tiny = g.scalar(1e-300);
    let den = g.add(a, tiny);
    let ratio = g.div(num, den);
    let alpha = g.relu(ratio);
    if cap < 1.0 {
        g.min_const(alpha, cap)
    } else {
        alpha
    }
}

/// Cached graphs for point-wise numeric evaluation of one field
/// configuration: sdf, normal, color, and per-layer activations for
/// diagnostics. Reuse one evaluator for repeated queries.
pub struct FieldEval {
    cfg: FieldConfig,
    graph: ExprGraph,
    x_slot: NodeId,
    v_slot: NodeId,
    f_root: NodeId,
    normal_root: NodeId,
    rgb_root: NodeId,
    layer_roots: Vec<(String, NodeId)>,
    buf: EvalBuffer,
    batch: Option<BatchSdf>,
}

struct BatchSdf {
    graph: ExprGraph,
    x_slot_idx: usize,
    f_root: NodeId,
    cols: usize,
    buf: EvalBuffer,
}

impl FieldEval {
    pub fn new(cfg: &FieldConfig) -> Self {
        let mut g = ExprGraph::new();
        let slots = declare_params(&mut g, cfg);
        let x = g.input("x", Shape::Vector(3));
        let v = g.input("v", Shape::Vector(3));

        let e = encode_position(&mut g, x, cfg.pe_pos);
        let mut layer_roots = Vec::new();
        let mut h = e;
        for (l, &(w, b)) in slots.trunk.iter().enumerate() {
            let a = g.affine(w, h, b);
            h = trunk_activation(&mut g, a, cfg.softplus_beta);
            layer_roots.push((format!("trunk.{l}"), h));
        }
        let feat = h;
        let f = sdf_head(&mut g, &slots, feat);
        layer_roots.push(("sdf".to_string(), f));
        let normal = {
            let mut grads = g.grad_scalar(f, &[x]).unwrap();
            grads.remove(0)
        };
        let rgb = color_head(&mut g, cfg, &slots, x, v, feat);
        layer_roots.push(("color".to_string(), rgb));

        FieldEval {
            cfg: cfg.clone(),
            graph: g,
            x_slot: x,
            v_slot: v,
            f_root: f,
            normal_root: normal,
            rgb_root: rgb,
            layer_roots,
            buf: EvalBuffer::new(),
            batch: None,
        }
    }

    pub fn cfg(&self) -> &FieldConfig {
        &self.cfg
    }

    fn eval_root(
        &mut self,
        params: &FieldParams,
        x: [f64; 3],
        v: Option<[f64; 3]>,
        root: NodeId,
    ) -> Result<Tensor, FieldError> {
        assert_eq!(params.cfg, self.cfg, "params built for another config");
        let xv = Tensor::vector(x.to_vec());
        let vv = Tensor::vector(v.unwrap_or([0.0, 0.0, 1.0]).to_vec());
        let mut binds = Bindings::for_graph(&self.graph);
        params.bind_into(&mut binds);
        let (xs, vs) = (self.x_slot, self.v_slot);
        let xi = self.graph.slot_of(xs).unwrap().1;
        let vi = self.graph.slot_of(vs).unwrap().1;
        binds.bind_input(xi, &xv);
        binds.bind_input(vi, &vv);
        self.buf.begin(&self.graph);
        self.buf.ensure(&self.graph, &binds, root)?;
        let out = self.buf.value(&self.graph, &binds, root).clone();
        if !out.all_finite() {
            // Walk the layers to report where finiteness was lost.
            for (name, lr) in &self.layer_roots {
                self.buf.ensure(&self.graph, &binds, *lr)?;
                if !self.buf.value(&self.graph, &binds, *lr).all_finite() {
                    return Err(FieldError::NonFinite { layer: name.clone() });
                }
            }
            return Err(FieldError::NonFinite { layer: "output".to_string() });
        }
        Ok(out)
    }

    /// Signed distance at a point.
    pub fn sdf(&mut self, params: &FieldParams, x: [f64; 3]) -> Result<f64, FieldError> {
        Ok(self.eval_root(params, x, None, self.f_root)?.as_scalar())
    }

    /// Surface normal: the input-gradient of the SDF (not normalized).
    pub fn normal(&mut self, params: &FieldParams, x: [f64; 3]) -> Result<[f64; 3], FieldError> {
        let t = self.eval_root(params, x, None, self.normal_root)?;
        Ok([t.data[0], t.data[1], t.data[2]])
    }

    /// View-dependent color; `v` must be unit length within 1e-6.
    pub fn color(
        &mut self,
        params: &FieldParams,
        x: [f64; 3],
        v: [f64; 3],
    ) -> Result<[f64; 3], FieldError> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(FieldError::NonUnitDirection { norm });
        }
        let t = self.eval_root(params, x, Some(v), self.rgb_root)?;
        Ok([t.data[0], t.data[1], t.data[2]])
    }

    /// Evaluate the SDF on many points, batching through the column-matrix
    /// graph. Used by mesh extraction.
    pub fn sdf_many(&mut self, params: &FieldParams, points: &[[f64; 3]]) -> Result<Vec<f64>, FieldError> {
        const COLS: usize = 512;
        if self.batch.is_none() {
            let mut g = ExprGraph::new();
            let slots = declare_params(&mut g, &self.cfg);
            let x = g.input("xb", Shape::Matrix(3, COLS));
            let (f, _) = sdf_batch(&mut g, &self.cfg, &slots, x);
            let x_slot_idx = g.slot_of(x).unwrap().1;
            self.batch = Some(BatchSdf { graph: g, x_slot_idx, f_root: f, cols: COLS, buf: EvalBuffer::new() });
        }
        let b = self.batch.as_mut().unwrap();
        let mut out = Vec::with_capacity(points.len());
        let mut chunk = Tensor::zeros(Shape::Matrix(3, b.cols));
        for block in points.chunks(b.cols) {
            for (j, p) in block.iter().enumerate() {
                chunk.data[j] = p[0];
                chunk.data[b.cols + j] = p[1];
                chunk.data[2 * b.cols + j] = p[2];
            }
            // Padding columns repeat the last point.
            for j in block.len()..b.cols {
                chunk.data[j] = block.last().unwrap()[0];
                chunk.data[b.cols + j] = block.last().unwrap()[1];
                chunk.data[2 * b.cols + j] = block.last().unwrap()[2];
            }
            let mut binds = Bindings::for_graph(&b.graph);
            params.bind_into(&mut binds);
            binds.bind_input(b.x_slot_idx, &chunk);
            b.buf.begin(&b.graph);
            b.buf.ensure(&b.graph, &binds, b.f_root)?;
            let f = b.buf.value(&b.graph, &binds, b.f_root);
            out.extend_from_slice(&f.data[..block.len()]);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> FieldConfig {
        FieldConfig {
            pe_pos: 2,
            pe_dir: 2,
            trunk_layers: 2,
            trunk_width: 16,
            color_layers: 1,
            color_width: 16,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn geometric_init_approximates_sphere() {
        let cfg = FieldConfig::default();
        let params = FieldParams::init(&cfg, 1);
        let mut ev = FieldEval::new(&cfg);
        let at_origin = ev.sdf(&params, [0.0, 0.0, 0.0]).unwrap();
        assert!(
            (at_origin + cfg.init_radius).abs() < 0.1,
            "sdf(0) = {at_origin}, expected about {}",
            -cfg.init_radius
        );
        for dir in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.577, 0.577, 0.577]] {
            let x = [dir[0] * 0.5, dir[1] * 0.5, dir[2] * 0.5];
            let on_surface = ev.sdf(&params, x).unwrap();
            assert!(on_surface.abs() < 0.1, "sdf at radius = {on_surface}");
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let cfg = small_cfg();
        let params = FieldParams::init(&cfg, 3);
        let dir = std::env::temp_dir().join("nshape_field_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.nshape");
        params.save(&path).unwrap();
        let loaded = FieldParams::load(&path).unwrap();
        assert_eq!(params, loaded);
        let mut ev = FieldEval::new(&cfg);
        let a = ev.sdf(&params, [0.2, -0.1, 0.4]).unwrap();
        let b = ev.sdf(&loaded, [0.2, -0.1, 0.4]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // save -> load -> save produces identical bytes
        let path2 = dir.join("ckpt2.nshape");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn color_in_unit_range_and_deterministic() {
        let cfg = small_cfg();
        let params = FieldParams::init(&cfg, 5);
        let mut ev = FieldEval::new(&cfg);
        let v = [0.0, 0.6, 0.8];
        let c1 = ev.color(&params, [0.1, 0.2, 0.3], v).unwrap();
        let c2 = ev.color(&params, [0.1, 0.2, 0.3], v).unwrap();
        assert_eq!(c1, c2);
        for c in c1 {
            assert!((0.0..=1.0).contains(&c));
        }
        assert!(matches!(
            ev.color(&params, [0.0; 3], [1.0, 1.0, 0.0]),
            Err(FieldError::NonUnitDirection { .. })
        ));
    }

    #[test]
    fn color_depends_on_view_direction() {
        let cfg = small_cfg();
        let mut ev = FieldEval::new(&cfg);
        let mut differs = 0;
        for seed in 0..10 {
            let params = FieldParams::init(&cfg, 100 + seed);
            // Init leaves color biases at zero but weights random; feed a
            // perturbed parameter set so the head is not at its symmetric
            // starting point.
            let mut params = params;
            let mut rng = StdRng::seed_from_u64(seed);
            for t in params.tensors.iter_mut() {
                for v in t.data.iter_mut() {
                    *v += rng.random_range(-0.05..0.05);
                }
            }
            let v = [0.0, 0.6, 0.8];
            let nv = [0.0, -0.6, -0.8];
            let a = ev.color(&params, [0.1, 0.0, 0.2], v).unwrap();
            let b = ev.color(&params, [0.1, 0.0, 0.2], nv).unwrap();
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12) {
                differs += 1;
            }
        }
        assert!(differs >= 1, "v and -v gave identical colors across all draws");
    }

    #[test]
    fn normal_trivial_fields() {
        // f(x) = x_0 via a hand-built graph.
        let mut g = ExprGraph::new();
        let x = g.input("x", Shape::Vector(3));
        let w = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let f = g.dot(w, x);
        let n = g.grad_scalar(f, &[x]).unwrap()[0];
        let xv = Tensor::vector(vec![0.3, -0.2, 0.9]);
        let mut b = Bindings::for_graph(&g);
        b.bind_input(0, &xv);
        let nv = crate::autodiff::evaluate(&g, &b, n).unwrap();
        assert_eq!(nv.data, vec![1.0, 0.0, 0.0]);

        // f(x) = |x|^2 / 2 at (1,2,3) -> (1,2,3).
        let mut g = ExprGraph::new();
        let x = g.input("x", Shape::Vector(3));
        let d = g.dot(x, x);
        let f = g.scale(d, 0.5);
        let n = g.grad_scalar(f, &[x]).unwrap()[0];
        let xv = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut b = Bindings::for_graph(&g);
        b.bind_input(0, &xv);
        let nv = crate::autodiff::evaluate(&g, &b, n).unwrap();
        assert_eq!(nv.data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn normal_matches_finite_differences() {
        let cfg = small_cfg();
        let params = FieldParams::init(&cfg, 9);
        let mut ev = FieldEval::new(&cfg);
        let mut rng = StdRng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..100 {
            let x = [
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
            ];
            let n = ev.normal(&params, x).unwrap();
            for k in 0..3 {
                let mut xp = x;
                xp[k] += h;
                let mut xm = x;
                xm[k] -= h;
                let fd = (ev.sdf(&params, xp).unwrap() - ev.sdf(&params, xm).unwrap()) / (2.0 * h);
                let denom = n[k].abs().max(fd.abs()).max(0.01);
                assert!(
                    (n[k] - fd).abs() / denom < 1e-5,
                    "axis {k}: analytic {} vs fd {fd}",
                    n[k]
                );
            }
        }
    }

    #[test]
    fn sdf_gradient_wrt_weights_checks_out() {
        // Exercises the full template path: gradient of sdf value with
        // respect to every parameter against central differences.
        let cfg = small_cfg();
        let params = FieldParams::init(&cfg, 21);
        let mut g = ExprGraph::new();
        let slots = declare_params(&mut g, &cfg);
        let x = g.input("x", Shape::Vector(3));
        let (f, _) = sdf_point(&mut g, &cfg, &slots, x);
        let inputs = vec![Tensor::vector(vec![0.3, -0.4, 0.2]), Tensor::vector(vec![0.0, 0.0, 1.0])];
        // Only x is declared as input here.
        let inputs = vec![inputs[0].clone()];
        for slot in 0..g.param_decls().len() {
            let target = (0..g.len())
                .find(|&i| matches!(g.slot_of(i), Some((crate::autodiff::SlotKind::Param, k)) if k == slot))
                .unwrap();
            let err = check_gradient(&g, f, target, &params.tensors, &inputs, 1e-5).unwrap();
            assert!(err < 1e-4, "param slot {slot}: rel err {err}");
        }
    }

    #[test]
    fn batched_sdf_matches_pointwise() {
        let cfg = small_cfg();
        let params = FieldParams::init(&cfg, 33);
        let mut ev = FieldEval::new(&cfg);
        let mut rng = StdRng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..700)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let batched = ev.sdf_many(&params, &pts).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let single = ev.sdf(&params, *p).unwrap();
            assert_relative_eq!(batched[i], single, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn alpha_examples() {
        assert_eq!(alpha_from_sdf(0.3, 0.3, 25.0), 0.0);
        let big = alpha_from_sdf(0.1, -0.1, 1e3, );
        assert!(big > 0.99, "alpha = {big}");
        assert_eq!(alpha_from_sdf(-0.2, 0.1, 25.0), 0.0);
    }

    proptest! {
        #[test]
        fn alpha_monotone_in_second_argument(
            f_i in -1.0f64..1.0,
            s in 0.5f64..200.0,
            a in -1.0f64..1.0,
            b in -1.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // Raising f_next never raises alpha.
            prop_assert!(alpha_from_sdf(f_i, hi, s) <= alpha_from_sdf(f_i, lo, s) + 1e-12);
        }

        #[test]
        fn alpha_in_unit_interval(
            f_i in -2.0f64..2.0,
            f_n in -2.0f64..2.0,
            s in 0.1f64..1e4,
        ) {
            let a = alpha_from_sdf(f_i, f_n, s);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn positional_encoding_injective(
            x0 in -1.0f64..1.0, x1 in -1.0f64..1.0,
        ) {
            // Raw coordinates ride along in the encoding, so distinct inputs
            // stay distinct.
            prop_assume!((x0 - x1).abs() > 1e-12);
            let mut g = ExprGraph::new();
            let x = g.input("x", Shape::Vector(3));
            let e = encode_position(&mut g, x, 4);
            let t0 = Tensor::vector(vec![x0, 0.0, 0.0]);
            let t1 = Tensor::vector(vec![x1, 0.0, 0.0]);
            let mut b0 = Bindings::for_graph(&g);
            b0.bind_input(0, &t0);
            let e0 = crate::autodiff::evaluate(&g, &b0, e).unwrap();
            let mut b1 = Bindings::for_graph(&g);
            b1.bind_input(0, &t1);
            let e1 = crate::autodiff::evaluate(&g, &b1, e).unwrap();
            prop_assert!(e0.data != e1.data);
        }
    }

    #[test]
    fn positional_encoding_deterministic() {
        let mut g = ExprGraph::new();
        let x = g.input("x", Shape::Vector(3));
        let e = encode_position(&mut g, x, 6);
        let t = Tensor::vector(vec![0.123, -0.456, 0.789]);
        let mut b = Bindings::for_graph(&g);
        b.bind_input(0, &t);
        let a = crate::autodiff::evaluate(&g, &b, e).unwrap();
        let c = crate::autodiff::evaluate(&g, &b, e).unwrap();
        assert_eq!(a.data, c.data);
        assert_eq!(a.len(), 3 + 6 * 6);
    }
}
