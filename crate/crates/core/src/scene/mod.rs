//! Toy differentiable 3D scene: a dense feature grid decoded by a linear map
//! into density (softplus) and colour (sigmoid).

mod render;
mod transform;

use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container;
use crate::error::{Error, Result};

pub use render::{render, render_backward, render_backward_multi, RenderOptions, RenderOutput};
pub use transform::{apply_transform, transform_backward, TransformNet};

/// Output channels of the decoder: density logit plus RGB logits.
pub const DECODED: usize = 4;

const MAGIC: &[u8; 4] = b"SCNE";

/// Feature grid over the cube `[-bounds, bounds]^3` with grid vertices at
/// both faces, plus a linear decoder `features -> (density, r, g, b)`.
///
/// The flat parameter layout, shared with gradient vectors, is the grid
/// (index `((z * G + y) * G + x) * F + f`), then decoder weights row-major
/// (`DECODED x F`), then decoder biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    grid_size: usize,
    features: usize,
    bounds: f64,
    grid: Vec<f64>,
    decoder_weights: Vec<f64>,
    decoder_bias: [f64; DECODED],
}

impl SceneParams {
    /// Grid filled with `cell` everywhere and an identity-like decoder
    /// (feature `i` drives decoded channel `i`).
    pub fn uniform(grid_size: usize, features: usize, bounds: f64, cell: &[f64]) -> Result<Self> {
        if grid_size < 2 || features == 0 || cell.len() != features || !(bounds > 0.0) {
            return Err(Error::Config(format!(
                "scene needs grid >= 2, F >= 1 matching the cell, bounds > 0 (G={grid_size}, F={features}, bounds={bounds})"
            )));
        }
        let mut decoder_weights = vec![0.0; DECODED * features];
        for i in 0..DECODED.min(features) {
            decoder_weights[i * features + i] = 1.0;
        }
        Ok(Self {
            grid_size,
            features,
            bounds,
            grid: cell.repeat(grid_size.pow(3)),
            decoder_weights,
            decoder_bias: [0.0; DECODED],
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn bounds(&self) -> f64 {
        self.bounds
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn grid_mut(&mut self) -> &mut [f64] {
        &mut self.grid
    }

    pub fn decoder_weights(&self) -> &[f64] {
        &self.decoder_weights
    }

    pub fn decoder_bias(&self) -> &[f64; DECODED] {
        &self.decoder_bias
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    pub fn param_count(&self) -> usize {
        self.grid.len() + self.decoder_weights.len() + DECODED
    }

    /// Flat index of feature `f` at grid vertex `(x, y, z)`.
    pub fn grid_index(&self, x: usize, y: usize, z: usize, f: usize) -> usize {
        ((z * self.grid_size + y) * self.grid_size + x) * self.features + f
    }

    /// World position of grid vertex `i` along one axis.
    pub fn vertex_coord(&self, i: usize) -> f64 {
        -self.bounds + 2.0 * self.bounds * i as f64 / (self.grid_size - 1) as f64
    }

    /// Distance between neighbouring grid vertices.
    pub fn cell_size(&self) -> f64 {
        2.0 * self.bounds / (self.grid_size - 1) as f64
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(&self.grid);
        v.extend_from_slice(&self.decoder_weights);
        v.extend_from_slice(&self.decoder_bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "flat parameters: {} vs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let (g, rest) = flat.split_at(self.grid.len());
        let (w, b) = rest.split_at(self.decoder_weights.len());
        self.grid.copy_from_slice(g);
        self.decoder_weights.copy_from_slice(w);
        self.decoder_bias.copy_from_slice(b);
        Ok(())
    }

    pub fn get_param(&self, i: usize) -> f64 {
        let (g, w) = (self.grid.len(), self.decoder_weights.len());
        if i < g {
            self.grid[i]
        } else if i < g + w {
            self.decoder_weights[i - g]
        } else {
            self.decoder_bias[i - g - w]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (g, w) = (self.grid.len(), self.decoder_weights.len());
        if i < g {
            self.grid[i] = v;
        } else if i < g + w {
            self.decoder_weights[i - g] = v;
        } else {
            self.decoder_bias[i - g - w] = v;
        }
    }

    /// `self -= step * grad` over the flat layout.
    pub fn descend(&mut self, grad: &[f64], step: f64) -> Result<()> {
        if grad.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} vs {} parameters",
                grad.len(),
                self.param_count()
            )));
        }
        let (g, rest) = grad.split_at(self.grid.len());
        let (w, b) = rest.split_at(self.decoder_weights.len());
        for (p, d) in self.grid.iter_mut().zip(g) {
            *p -= step * d;
        }
        for (p, d) in self.decoder_weights.iter_mut().zip(w) {
            *p -= step * d;
        }
        for (p, d) in self.decoder_bias.iter_mut().zip(b) {
            *p -= step * d;
        }
        Ok(())
    }

    pub fn set_decoder(&mut self, weights: &[f64], bias: [f64; DECODED]) -> Result<()> {
        if weights.len() != self.decoder_weights.len() {
            return Err(Error::ShapeMismatch("decoder weights".into()));
        }
        self.decoder_weights.copy_from_slice(weights);
        self.decoder_bias = bias;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.grid
            .iter()
            .chain(&self.decoder_weights)
            .chain(&self.decoder_bias)
            .all(|v| v.is_finite())
    }

    /// Box-blurs the colour channels (features 1..) of the grid `passes`
    /// times, leaving density untouched. Used to build detail-poor
    /// starting scenes.
    pub fn smooth_colors(&mut self, passes: usize) {
        self.smooth_features(1..self.features, passes);
    }

    /// Box-blurs the density feature, softening the geometry.
    pub fn smooth_density(&mut self, passes: usize) {
        self.smooth_features(0..1, passes);
    }

    fn smooth_features(&mut self, features: std::ops::Range<usize>, passes: usize) {
        let g = self.grid_size;
        for _ in 0..passes {
            for axis in 0..3 {
                let src = self.grid.clone();
                for z in 0..g {
                    for y in 0..g {
                        for x in 0..g {
                            let mut c = [x, y, z];
                            let here = self.grid_index(x, y, z, 0);
                            let lo = c[axis].saturating_sub(1);
                            let hi = (c[axis] + 1).min(g - 1);
                            c[axis] = lo;
                            let a = self.grid_index(c[0], c[1], c[2], 0);
                            c[axis] = hi;
                            let b = self.grid_index(c[0], c[1], c[2], 0);
                            for f in features.clone() {
                                self.grid[here + f] = (src[a + f] + src[here + f] + src[b + f]) / 3.0;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn write_to(&self, w: impl std::io::Write) -> Result<()> {
        let g = self.grid_size as u32;
        let f = self.features as u32;
        let mut payload = Vec::with_capacity(1 + self.param_count());
        payload.push(self.bounds);
        payload.extend(self.to_flat());
        container::write(w, MAGIC, &[g, g, g, f, DECODED as u32, f], &payload)
    }

    pub fn read_from(r: impl std::io::Read) -> Result<SceneParams> {
        let (dims, payload) = container::read(r, MAGIC)?;
        let [g, g2, g3, f, out, fin] = dims[..] else {
            return Err(Error::Format(format!("SCNE header has {} dims", dims.len())));
        };
        if g != g2 || g != g3 || out as usize != DECODED || fin != f {
            return Err(Error::Format(format!("unsupported SCNE dims {dims:?}")));
        }
        let (g, f) = (g as usize, f as usize);
        let bounds = *payload
            .first()
            .ok_or_else(|| Error::Format("SCNE payload empty".into()))?;
        let mut scene = SceneParams::uniform(g, f, bounds, &vec![0.0; f])
            .map_err(|e| Error::Format(e.to_string()))?;
        scene
            .set_flat(&payload[1..])
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(scene)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SceneParams> {
        SceneParams::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Synthetic scene shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeSpec {
    Sphere,
    TexturedSphere,
    TwoBlob,
    CheckerCube,
}

impl FromStr for ShapeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeSpec::Sphere),
            "textured-sphere" => Ok(ShapeSpec::TexturedSphere),
            "two-blob" => Ok(ShapeSpec::TwoBlob),
            "checker-cube" => Ok(ShapeSpec::CheckerCube),
            other => Err(Error::Config(format!("unknown scene spec {other:?}"))),
        }
    }
}

impl ShapeSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeSpec::Sphere => "sphere",
            ShapeSpec::TexturedSphere => "textured-sphere",
            ShapeSpec::TwoBlob => "two-blob",
            ShapeSpec::CheckerCube => "checker-cube",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOptions {
    pub grid_size: usize,
    pub bounds: f64,
    pub radius: f64,
    /// Standard deviation of the per-vertex colour-logit noise of textured shapes.
    pub texture_amplitude: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            grid_size: 24,
            bounds: 1.0,
            radius: 0.6,
            texture_amplitude: 1.0,
        }
    }
}

pub const INSIDE_LOGIT: f64 = 12.0;
pub const OUTSIDE_LOGIT: f64 = -6.0;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Density logit for a signed distance (positive inside), ramping from
/// outside to inside over one grid cell.
fn density_logit(inside_distance: f64, cell: f64) -> f64 {
    let s = (inside_distance / cell + 0.5).clamp(0.0, 1.0);
    OUTSIDE_LOGIT + (INSIDE_LOGIT - OUTSIDE_LOGIT) * s
}

/// Deterministic synthetic scene with the default options.
pub fn init_synthetic(spec: ShapeSpec, seed: u64) -> SceneParams {
    init_synthetic_with(spec, seed, &SynthOptions::default())
        .expect("default synth options are valid")
}

pub fn init_synthetic_with(spec: ShapeSpec, seed: u64, opts: &SynthOptions) -> Result<SceneParams> {
    let mut scene = SceneParams::uniform(opts.grid_size, 4, opts.bounds, &[OUTSIDE_LOGIT, 0.0, 0.0, 0.0])?;
    let g = opts.grid_size;
    let cell = scene.cell_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = opts.radius;
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let p = [scene.vertex_coord(x), scene.vertex_coord(y), scene.vertex_coord(z)];
                let norm = |q: [f64; 3]| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                let (inside, color) = match spec {
                    ShapeSpec::Sphere | ShapeSpec::TexturedSphere => {
                        (r - norm(p), [0.8, 0.45, 0.3])
                    }
                    ShapeSpec::TwoBlob => {
                        let br = 0.6 * r;
                        let left = br - norm([p[0] + 0.65 * r, p[1], p[2]]);
                        let right = br - norm([p[0] - 0.65 * r, p[1], p[2]]);
                        if left >= right {
                            (left, [0.2, 0.6, 0.85])
                        } else {
                            (right, [0.85, 0.75, 0.2])
                        }
                    }
                    ShapeSpec::CheckerCube => {
                        let h = 0.8 * r;
                        let inside = h - p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        let parity = (x / 2 + y / 2 + z / 2) % 2;
                        let color = if parity == 0 { [0.9, 0.9, 0.9] } else { [0.15, 0.2, 0.3] };
                        (inside, color)
                    }
                };
                let i = scene.grid_index(x, y, z, 0);
                scene.grid[i] = density_logit(inside, cell);
                for c in 0..3 {
                    scene.grid[i + 1 + c] = logit(color[c]);
                }
            }
        }
    }
    if spec == ShapeSpec::TexturedSphere {
        // Drawn after the density pass so the seed only touches colour.
        for cell in scene.grid.chunks_exact_mut(4) {
            for c in &mut cell[1..] {
                let n: f64 = StandardNormal.sample(&mut rng);
                *c += opts.texture_amplitude * n;
            }
        }
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthesis_is_deterministic() {
        for spec in [ShapeSpec::Sphere, ShapeSpec::TexturedSphere, ShapeSpec::TwoBlob, ShapeSpec::CheckerCube] {
            assert_eq!(init_synthetic(spec, 3), init_synthetic(spec, 3));
        }
    }

    #[test]
    fn sphere_density_high_inside_low_outside() {
        let s = init_synthetic(ShapeSpec::Sphere, 0);
        let c = s.grid_size() / 2;
        assert!(s.grid()[s.grid_index(c, c, c, 0)] > 10.0);
        assert!(s.grid()[s.grid_index(0, 0, 0, 0)] < -5.0);
        assert!(s.grid()[s.grid_index(c, c, s.grid_size() - 1, 0)] < -5.0);
    }

    #[test]
    fn texture_seed_changes_color_only() {
        let a = init_synthetic(ShapeSpec::TexturedSphere, 1);
        let b = init_synthetic(ShapeSpec::TexturedSphere, 2);
        let density = |s: &SceneParams| s.grid().chunks(4).map(|c| c[0]).collect::<Vec<_>>();
        let color = |s: &SceneParams| s.grid().chunks(4).flat_map(|c| c[1..].to_vec()).collect::<Vec<_>>();
        assert_eq!(density(&a), density(&b));
        assert_ne!(color(&a), color(&b));
    }

    #[test]
    fn unknown_spec_is_config_error() {
        assert!(matches!("torus".parse::<ShapeSpec>(), Err(Error::Config(_))));
        assert_eq!("two-blob".parse::<ShapeSpec>().unwrap(), ShapeSpec::TwoBlob);
    }

    #[test]
    fn flat_layout_round_trips() {
        let mut s = init_synthetic(ShapeSpec::TwoBlob, 0);
        let mut flat = s.to_flat();
        flat[s.grid_len() + 1] = 0.25;
        *flat.last_mut().unwrap() = -1.5;
        s.set_flat(&flat).unwrap();
        assert_eq!(s.decoder_weights()[1], 0.25);
        assert_eq!(s.decoder_bias()[3], -1.5);
        assert_eq!(s.get_param(s.param_count() - 1), -1.5);
        assert!(s.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn scne_header_and_round_trip() {
        let s = init_synthetic(ShapeSpec::CheckerCube, 0);
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SCNE");
        let back = SceneParams::read_from(&buf[..]).unwrap();
        // f32 payload: exact for the values used by the synthetic shapes up to rounding.
        for (a, b) in s.to_flat().iter().zip(back.to_flat()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        buf[0] = b'X';
        assert!(SceneParams::read_from(&buf[..]).is_err());
    }

    #[test]
    fn smoothing_leaves_density_alone() {
        let s = init_synthetic(ShapeSpec::TexturedSphere, 4);
        let mut t = s.clone();
        t.smooth_colors(2);
        for (a, b) in s.grid().chunks(4).zip(t.grid().chunks(4)) {
            assert_eq!(a[0], b[0]);
        }
        let var = |s: &SceneParams| s.grid().chunks(4).map(|c| c[1] * c[1]).sum::<f64>();
        assert!(var(&t) < var(&s));
    }
}
