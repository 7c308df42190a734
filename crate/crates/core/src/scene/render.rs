//! Emission-absorption ray marching over the feature grid, and its exact
//! reverse-mode derivative with respect to every scene parameter.
//!
//! Per ray, samples sit at the midpoints of `S` equal segments of the
//! ray/box overlap. With `sigma_k = softplus(h0)`, `c_k = sigmoid(h1..3)`
//! and `alpha_k = 1 - exp(-sigma_k * step)`, the pixel colour is
//! `C = sum_k T_k alpha_k c_k` over a black background.

use nalgebra::Vector3;

use super::{SceneParams, DECODED};
use crate::error::{shape_err, Error, Result};
use crate::field::FieldStack;
use crate::geometry::CameraView;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Samples per ray.
    pub samples: usize,
    /// Whether to produce the normal map (it costs six extra density
    /// queries per covered pixel and is never differentiated).
    pub normals: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            normals: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    /// RGB in [0, 1].
    pub image: FieldStack,
    /// Opacity-weighted expected termination, as camera z-depth. Masked
    /// valid where the accumulated opacity reaches 0.5.
    pub depth: FieldStack,
    /// World-space unit normals where alpha > 0.01, zero elsewhere.
    pub normal: FieldStack,
    /// Accumulated opacity in [0, 1].
    pub alpha: FieldStack,
}

impl RenderOutput {
    /// Binary foreground mask (alpha >= 0.5) as a one-channel field.
    pub fn silhouette(&self) -> FieldStack {
        self.alpha.map(|a| if a >= 0.5 { 1.0 } else { 0.0 })
    }
}

const DEPTH_VALID_ALPHA: f64 = 0.5;
const NORMAL_MIN_ALPHA: f64 = 0.01;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Eight trilinear corners of a query point: flat grid offsets (feature 0)
/// and weights.
#[derive(Clone, Copy, Default)]
struct Corners {
    index: [usize; 8],
    weight: [f64; 8],
}

fn corners(scene: &SceneParams, p: &Vector3<f64>) -> Corners {
    let g = scene.grid_size;
    let scale = (g - 1) as f64 / (2.0 * scene.bounds);
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let u = ((p[a] + scene.bounds) * scale).clamp(0.0, (g - 1) as f64);
        let i = (u.floor() as usize).min(g - 2);
        base[a] = i;
        frac[a] = u - i as f64;
    }
    let mut c = Corners::default();
    for k in 0..8 {
        let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
        c.index[k] = scene.grid_index(base[0] + dx, base[1] + dy, base[2] + dz, 0);
        let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
        let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
        let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
        c.weight[k] = wx * wy * wz;
    }
    c
}

fn interpolate(scene: &SceneParams, c: &Corners, feat: &mut [f64]) {
    feat.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..8 {
        let cell = &scene.grid[c.index[k]..c.index[k] + scene.features];
        for (f, v) in feat.iter_mut().zip(cell) {
            *f += c.weight[k] * v;
        }
    }
}

fn decode(scene: &SceneParams, feat: &[f64]) -> [f64; DECODED] {
    let mut h = scene.decoder_bias;
    for (o, ho) in h.iter_mut().enumerate() {
        let row = &scene.decoder_weights[o * scene.features..(o + 1) * scene.features];
        *ho += row.iter().zip(feat).map(|(w, f)| w * f).sum::<f64>();
    }
    h
}

fn density_at(scene: &SceneParams, p: &Vector3<f64>, feat: &mut [f64]) -> f64 {
    let c = corners(scene, p);
    interpolate(scene, &c, feat);
    softplus(decode(scene, feat)[0])
}

/// Ray parameter interval inside the scene cube, if any.
fn box_interval(scene: &SceneParams, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
    let b = scene.bounds;
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < -b || o[a] > b {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut lo, mut hi) = ((-b - o[a]) * inv, (b - o[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0).then_some((t0, t1))
}

/// Per-sample forward quantities kept for the backward pass.
#[derive(Clone, Copy, Default)]
struct SampleState {
    corners: Corners,
    h0: f64,
    alpha: f64,
    color: [f64; 3],
    transmittance: f64,
}

struct Ray {
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    t0: f64,
    dt: f64,
    /// World-space length of one segment.
    step: f64,
}

impl Ray {
    fn new(scene: &SceneParams, cam: &CameraView, x: usize, y: usize, samples: usize) -> Option<Ray> {
        let (origin, dir) = cam.ray(x as f64, y as f64);
        let (t0, t1) = box_interval(scene, &origin, &dir)?;
        let dt = (t1 - t0) / samples as f64;
        Some(Ray {
            origin,
            dir,
            t0,
            dt,
            step: dt * dir.norm(),
        })
    }

    fn t(&self, k: usize) -> f64 {
        self.t0 + (k as f64 + 0.5) * self.dt
    }
}

/// Marches one ray, filling `states`. Returns (colour, opacity, depth sum).
fn march(scene: &SceneParams, ray: &Ray, states: &mut [SampleState], feat: &mut [f64]) -> ([f64; 3], f64, f64) {
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    for (k, st) in states.iter_mut().enumerate() {
        let t = ray.t(k);
        let p = ray.origin + t * ray.dir;
        st.corners = corners(scene, &p);
        interpolate(scene, &st.corners, feat);
        let h = decode(scene, feat);
        let sigma = softplus(h[0]);
        st.h0 = h[0];
        st.alpha = 1.0 - (-sigma * ray.step).exp();
        st.color = [sigmoid(h[1]), sigmoid(h[2]), sigmoid(h[3])];
        st.transmittance = trans;
        let w = trans * st.alpha;
        for c in 0..3 {
            color[c] += w * st.color[c];
        }
        depth_sum += w * t;
        trans *= 1.0 - st.alpha;
    }
    (color, 1.0 - trans, depth_sum)
}

fn check_camera(cam: &CameraView) -> Result<()> {
    if cam.width() < 8 || cam.height() < 8 {
        return Err(Error::Contract(format!(
            "render resolution must be at least 8 (got {}x{})",
            cam.width(),
            cam.height()
        )));
    }
    Ok(())
}

/// Renders image, depth, normals and opacity of `scene` seen from `cam`.
/// Rays that miss the scene cube produce zero opacity.
pub fn render(scene: &SceneParams, cam: &CameraView, opts: &RenderOptions) -> Result<RenderOutput> {
    check_camera(cam)?;
    let (w, h) = (cam.width(), cam.height());
    let mut image = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut normal = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut states = vec![SampleState::default(); opts.samples];
    let mut feat = vec![0.0; scene.features];
    let probe = scene.cell_size();
    for y in 0..h {
        for x in 0..w {
            let Some(ray) = Ray::new(scene, cam, x, y, opts.samples) else {
                continue;
            };
            let (c, a, dsum) = march(scene, &ray, &mut states, &mut feat);
            let k = y * w + x;
            image[3 * k..3 * k + 3].copy_from_slice(&c);
            alpha[k] = a;
            if a > 1e-6 {
                depth[k] = dsum / a;
            }
            if opts.normals && a > NORMAL_MIN_ALPHA {
                let p = ray.origin + depth[k] * ray.dir;
                let mut grad = Vector3::zeros();
                for axis in 0..3 {
                    let mut e = Vector3::zeros();
                    e[axis] = probe;
                    let plus = density_at(scene, &(p + e), &mut feat);
                    let minus = density_at(scene, &(p - e), &mut feat);
                    grad[axis] = (plus - minus) / (2.0 * probe);
                }
                let n = (-grad)
                    .try_normalize(1e-12)
                    .unwrap_or_else(|| -ray.dir.normalize());
                normal[3 * k..3 * k + 3].copy_from_slice(n.as_slice());
            }
        }
    }
    let depth_mask = alpha.iter().map(|&a| a >= DEPTH_VALID_ALPHA).collect();
    Ok(RenderOutput {
        image: FieldStack::from_data(w, h, 3, image)?,
        depth: FieldStack::from_data(w, h, 1, depth)?.with_mask(depth_mask)?,
        normal: FieldStack::from_data(w, h, 3, normal)?,
        alpha: FieldStack::from_data(w, h, 1, alpha)?,
    })
}

/// Gradient of `sum(image_grad * render(scene, cam).image)` with respect to
/// the flat scene parameters.
pub fn render_backward(
    scene: &SceneParams,
    cam: &CameraView,
    opts: &RenderOptions,
    image_grad: &FieldStack,
) -> Result<Vec<f64>> {
    let (_, mut grads) = render_backward_multi(scene, cam, opts, &[image_grad])?;
    Ok(grads.pop().expect("one gradient per input"))
}

/// Backward pass for several image-space cotangents at once, sharing the
/// forward march. Also returns the rendered image.
pub fn render_backward_multi(
    scene: &SceneParams,
    cam: &CameraView,
    opts: &RenderOptions,
    image_grads: &[&FieldStack],
) -> Result<(FieldStack, Vec<Vec<f64>>)> {
    check_camera(cam)?;
    let (w, h) = (cam.width(), cam.height());
    for g in image_grads {
        if g.width() != w || g.height() != h || g.channels() != 3 {
            return shape_err(format!(
                "image gradient {}x{}x{} vs render {w}x{h}x3",
                g.width(),
                g.height(),
                g.channels()
            ));
        }
    }
    let nf = scene.features;
    let grid_len = scene.grid.len();
    let mut out: Vec<Vec<f64>> = image_grads.iter().map(|_| vec![0.0; scene.param_count()]).collect();
    let mut image = vec![0.0; w * h * 3];
    let mut states = vec![SampleState::default(); opts.samples];
    let mut feat = vec![0.0; nf];
    let mut dfeat = vec![0.0; nf];
    for y in 0..h {
        for x in 0..w {
            let Some(ray) = Ray::new(scene, cam, x, y, opts.samples) else {
                continue;
            };
            let (c, _, _) = march(scene, &ray, &mut states, &mut feat);
            let k = y * w + x;
            image[3 * k..3 * k + 3].copy_from_slice(&c);
            for (g, grad) in image_grads.iter().zip(out.iter_mut()) {
                let gp = g.pixel(x, y);
                if gp.iter().all(|&v| v == 0.0) {
                    continue;
                }
                // Colour of everything behind sample k, as seen from k+1.
                let mut behind = [0.0; 3];
                for st in states.iter().rev() {
                    let mut d_alpha = 0.0;
                    let mut dh = [0.0; DECODED];
                    for ch in 0..3 {
                        d_alpha += gp[ch] * (st.color[ch] - behind[ch]);
                        let d_color = gp[ch] * st.transmittance * st.alpha;
                        dh[1 + ch] = d_color * st.color[ch] * (1.0 - st.color[ch]);
                    }
                    d_alpha *= st.transmittance;
                    // d alpha / d sigma = step * (1 - alpha); d sigma / d h0 = sigmoid(h0).
                    dh[0] = d_alpha * ray.step * (1.0 - st.alpha) * sigmoid(st.h0);
                    for ch in 0..3 {
                        behind[ch] = st.alpha * st.color[ch] + (1.0 - st.alpha) * behind[ch];
                    }
                    if dh.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    // Features are needed for the decoder-weight gradient.
                    interpolate(scene, &st.corners, &mut feat);
                    for f in 0..nf {
                        dfeat[f] = (0..DECODED)
                            .map(|o| scene.decoder_weights[o * nf + f] * dh[o])
                            .sum();
                    }
                    for o in 0..DECODED {
                        for f in 0..nf {
                            grad[grid_len + o * nf + f] += dh[o] * feat[f];
                        }
                        grad[grid_len + DECODED * nf + o] += dh[o];
                    }
                    for j in 0..8 {
                        let base = st.corners.index[j];
                        let wj = st.corners.weight[j];
                        for f in 0..nf {
                            grad[base + f] += wj * dfeat[f];
                        }
                    }
                }
            }
        }
    }
    Ok((FieldStack::from_data(w, h, 3, image)?, out))
}
