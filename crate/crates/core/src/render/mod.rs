//! Ray generation, stratified sampling, discrete volume rendering, and
//! aggregation of normal parameter-Jacobians along rays.
//!
//! Convention: camera space looks down +z with x right and y down. Pixel
//! coordinates are continuous; callers pass `i + 0.5` for pixel centers.

pub mod templates;

use crate::field::FieldError;
use crate::io::{malformed, FormatError};
use crate::mishape::JacobianTriple;
use rand::rngs::SmallRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("pixel ({px}, {py}) outside image bounds {w}x{h}")]
    OutOfBounds { px: f64, py: f64, w: usize, h: usize },
    #[error("invalid sample range [{near}, {far}]")]
    BadRange { near: f64, far: f64 },
    #[error("need at least 2 samples per ray (got {0})")]
    BadSampleCount(usize),
    #[error("camera rotation block is not orthonormal (deviation {0:.2e})")]
    NotOrthonormal(f64),
    #[error("camera intrinsics must be positive (fx={fx}, fy={fy})")]
    BadIntrinsics { fx: f64, fy: f64 },
    #[error("ray carries no weight (sum {0:.2e} < 1e-6)")]
    ZeroWeightRay(f64),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Pinhole camera: camera-to-world pose and intrinsics in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Row-major camera-to-world matrix. Columns of the rotation block are
    /// the camera axes (x right, y down, z forward) in world coordinates.
    pub c2w: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::BadIntrinsics { fx: self.fx, fy: self.fy });
        }
        // Rotation block orthonormality within 1e-6.
        let r = &self.c2w;
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[k][i] * r[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        if worst > 1e-6 {
            return Err(RenderError::NotOrthonormal(worst));
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 3] {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.c2w;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// Ray through a continuous pixel coordinate.
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let dc = [(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0];
        let dw = self.rotate(dc);
        let n = (dw[0] * dw[0] + dw[1] * dw[1] + dw[2] * dw[2]).sqrt();
        Ray { origin: self.center(), dir: [dw[0] / n, dw[1] / n, dw[2] / n] }
    }

    /// Project a world point: returns (px, py, camera-space depth). Depth is
    /// the camera-space z; points behind the camera keep their negative z.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let o = self.center();
        let d = [p[0] - o[0], p[1] - o[1], p[2] - o[2]];
        let r = &self.c2w;
        // World-to-camera rotation is the transpose of the rotation block.
        let xc = r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2];
        let yc = r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2];
        let zc = r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2];
        (self.cx + self.fx * xc / zc, self.cy + self.fy * yc / zc, zc)
    }
}

/// Rays through the listed pixel coordinates; errors on out-of-bounds pixels.
pub fn make_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Result<Vec<Ray>, RenderError> {
    camera.validate()?;
    let mut out = Vec::with_capacity(pixels.len());
    for &(px, py) in pixels {
        if !(0.0..=camera.width as f64).contains(&px) || !(0.0..=camera.height as f64).contains(&py) {
            return Err(RenderError::OutOfBounds { px, py, w: camera.width, h: camera.height });
        }
        out.push(camera.ray(px, py));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Uniform,
    Stratified,
}

/// Distances along a ray: uniform places endpoints inclusively, stratified
/// draws one point per equal bin. Deterministic per seed.
pub fn sample_ray(
    t_near: f64,
    t_far: f64,
    n: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<Vec<f64>, RenderError> {
    if !(t_near < t_far) {
        return Err(RenderError::BadRange { near: t_near, far: t_far });
    }
    if n < 2 {
        return Err(RenderError::BadSampleCount(n));
    }
    let span = t_far - t_near;
    Ok(match mode {
        SampleMode::Uniform => (0..n)
            .map(|i| t_near + span * i as f64 / (n - 1) as f64)
            .collect(),
        SampleMode::Stratified => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..n)
                .map(|i| t_near + span * (i as f64 + rng.random::<f64>()) / n as f64)
                .collect()
        }
    })
}

/// Per-ray samples with section opacities and compositing weights:
/// weights[i] = alpha[i] * prod_{j<i} (1 - alpha[j]).
#[derive(Debug, Clone)]
pub struct RaySampleSet {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    /// Ascending sample distances (n entries; sections run between them).
    pub ts: Vec<f64>,
    /// deltas[i] = ts[i+1] - ts[i] (n-1 entries).
    pub deltas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RaySampleSet {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Compositing weights from opacities, by exact sequential products.
pub fn compose_weights(alphas: &[f64]) -> Vec<f64> {
    let mut t = 1.0;
    let mut out = Vec::with_capacity(alphas.len());
    for &a in alphas {
        out.push(t * a);
        t *= 1.0 - a;
    }
    out
}

/// Blend per-sample colors with compositing weights.
pub fn composite_color(alphas: &[f64], colors: &[[f64; 3]]) -> [f64; 3] {
    assert_eq!(alphas.len(), colors.len());
    let w = compose_weights(alphas);
    let mut rgb = [0.0; 3];
    for (wi, c) in w.iter().zip(colors) {
        for k in 0..3 {
            rgb[k] += wi * c[k];
        }
    }
    rgb
}

/// Ray-aggregated, concatenated gradient of the three normal components with
/// respect to the designated parameter subset.
#[derive(Debug, Clone)]
pub struct NormalJacobian {
    /// Concat over axes x,y,z of the flattened per-parameter gradients.
    pub values: Vec<f64>,
    /// Sum of compositing weights that entered the aggregation.
    pub total_weight: f64,
}

impl NormalJacobian {
    pub fn axis_len(&self) -> usize {
        self.values.len() / 3
    }

    pub fn is_zero_weight(&self) -> bool {
        self.total_weight < 1e-6
    }

    /// Split into per-axis lengths and unit directions.
    pub fn decompose(&self) -> JacobianTriple {
        let d = self.axis_len();
        let mut axes = Vec::with_capacity(3);
        for k in 0..3 {
            let block = &self.values[k * d..(k + 1) * d];
            let len: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir = if len > 0.0 {
                block.iter().map(|v| v / len).collect()
            } else {
                vec![0.0; d]
            };
            axes.push((len, dir));
        }
        JacobianTriple::new(axes.try_into().unwrap(), 1.0)
    }
}

/// Jitter a point with isotropic Gaussian noise (used for near-surface
/// eikonal samples).
pub fn jitter_point(p: [f64; 3], sigma: f64, rng: &mut SmallRng) -> [f64; 3] {
    use rand_distr::StandardNormal;
    let mut out = p;
    for v in out.iter_mut() {
        let g: f64 = rng.sample(StandardNormal);
        *v += sigma * g;
    }
    out
}

// ---- pose file: plain text, one camera per block ----

/// Serialize cameras: per block, 16 reals of the row-major camera-to-world
/// matrix over four lines, then `fx fy cx cy w h`.
pub fn write_poses(cams: &[Camera]) -> String {
    let mut out = String::new();
    for (i, c) in cams.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for row in &c.c2w {
            out.push_str(&format!("{} {} {} {}\n", row[0], row[1], row[2], row[3]));
        }
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            c.fx, c.fy, c.cx, c.cy, c.width, c.height
        ));
    }
    out
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Camera>, FormatError> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() % 22 != 0 {
        return Err(malformed(path, format!("pose token count {} not a multiple of 22", tokens.len())));
    }
    let mut cams = Vec::new();
    for block in tokens.chunks(22) {
        let mut vals = [0.0f64; 22];
        for (i, t) in block.iter().enumerate() {
            vals[i] = t
                .parse()
                .map_err(|_| malformed(path, format!("bad pose number `{t}`")))?;
        }
        let mut c2w = [[0.0; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                c2w[r][c] = vals[r * 4 + c];
            }
        }
        cams.push(Camera {
            c2w,
            fx: vals[16],
            fy: vals[17],
            cx: vals[18],
            cy: vals[19],
            width: vals[20] as usize,
            height: vals[21] as usize,
        });
    }
    Ok(cams)
}

pub fn load_poses(path: &Path) -> Result<Vec<Camera>, FormatError> {
    let text = std::fs::read_to_string(path)?;
    parse_poses(&text, path)
}

pub fn save_poses(path: &Path, cams: &[Camera]) -> Result<(), FormatError> {
    std::fs::write(path, write_poses(cams))?;
    Ok(())
}

/// Intersect a ray with an axis-aligned box, returning the [t0, t1] overlap
/// with t0 >= min_t, or None when the ray misses.
pub fn ray_box_range(ray: &Ray, lo: [f64; 3], hi: [f64; 3], min_t: f64) -> Option<(f64, f64)> {
    let mut t0 = min_t;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if ray.dir[k].abs() < 1e-12 {
            if ray.origin[k] < lo[k] || ray.origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / ray.dir[k];
        let (mut a, mut b) = ((lo[k] - ray.origin[k]) * inv, (hi[k] - ray.origin[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}
