//! Residual feature-grid transform: two 3x3x3 convolutions with a tanh in
//! between, added back onto the input grid. The second convolution starts
//! at zero so a fresh network is the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SceneParams;
use crate::error::{shape_err, Result};

const TAPS: usize = 27;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformNet {
    features: usize,
    hidden: usize,
    /// `[hidden][features][27]`
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `[features][hidden][27]`, zero at initialisation.
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl TransformNet {
    /// Identity-initialised network: random first layer, zero second layer.
    pub fn new(features: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / (features * TAPS) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            features,
            hidden,
            w1: (0..hidden * features * TAPS).map(|_| normal.sample(&mut rng)).collect(),
            b1: vec![0.0; hidden],
            w2: vec![0.0; features * hidden * TAPS],
            b2: vec![0.0; features],
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flat layout: w1, b1, w2, b2.
    pub fn to_flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return shape_err(format!("net parameters: {} vs {}", flat.len(), self.param_count()));
        }
        let mut rest = flat;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(part.len());
            part.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn descend(&mut self, grad: &[f64], step: f64) -> Result<()> {
        let mut flat = self.to_flat();
        if grad.len() != flat.len() {
            return shape_err("net gradient length");
        }
        for (p, g) in flat.iter_mut().zip(grad) {
            *p -= step * g;
        }
        self.set_flat(&flat)
    }

    pub fn is_identity(&self) -> bool {
        self.w2.iter().chain(&self.b2).all(|&v| v == 0.0)
    }
}

/// 3D "same" convolution with zero padding over a `g^3 x cin` grid.
fn conv3d(input: &[f64], g: usize, cin: usize, w: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; g * g * g * cout];
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let o = ((z * g + y) * g + x) * cout;
                out[o..o + cout].copy_from_slice(b);
                for_taps(g, x, y, z, |tap, src| {
                    let xin = &input[src * cin..(src + 1) * cin];
                    for co in 0..cout {
                        let wrow = &w[(co * cin) * TAPS..];
                        let mut acc = 0.0;
                        for (ci, v) in xin.iter().enumerate() {
                            acc += wrow[ci * TAPS + tap] * v;
                        }
                        out[o + co] += acc;
                    }
                });
            }
        }
    }
    out
}

/// Calls `f(tap, source_cell)` for every in-bounds neighbour.
#[inline]
fn for_taps(g: usize, x: usize, y: usize, z: usize, mut f: impl FnMut(usize, usize)) {
    for dz in 0..3 {
        let Some(sz) = (z + dz).checked_sub(1).filter(|&v| v < g) else { continue };
        for dy in 0..3 {
            let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < g) else { continue };
            for dx in 0..3 {
                let Some(sx) = (x + dx).checked_sub(1).filter(|&v| v < g) else { continue };
                f((dz * 3 + dy) * 3 + dx, (sz * g + sy) * g + sx);
            }
        }
    }
}

fn check(net: &TransformNet, base: &SceneParams) -> Result<()> {
    if net.features != base.features() {
        return shape_err(format!(
            "transform net has {} features, scene grid {}",
            net.features,
            base.features()
        ));
    }
    Ok(())
}

struct Activations {
    hidden: Vec<f64>,
    delta: Vec<f64>,
}

fn forward(net: &TransformNet, base: &SceneParams) -> Activations {
    let g = base.grid_size();
    let pre = conv3d(base.grid(), g, net.features, &net.w1, &net.b1, net.hidden);
    let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
    let delta = conv3d(&hidden, g, net.hidden, &net.w2, &net.b2, net.features);
    Activations { hidden, delta }
}

/// Scene whose grid is `base.grid + net(base.grid)`; the decoder is copied.
pub fn apply_transform(net: &TransformNet, base: &SceneParams) -> Result<SceneParams> {
    check(net, base)?;
    let act = forward(net, base);
    let mut out = base.clone();
    for (v, d) in out.grid_mut().iter_mut().zip(&act.delta) {
        *v += d;
    }
    Ok(out)
}

/// Gradient of a loss with respect to the network parameters, given the
/// loss gradient `grid_grad` with respect to the transformed grid.
pub fn transform_backward(net: &TransformNet, base: &SceneParams, grid_grad: &[f64]) -> Result<Vec<f64>> {
    check(net, base)?;
    if grid_grad.len() != base.grid_len() {
        return shape_err(format!("grid gradient {} vs {}", grid_grad.len(), base.grid_len()));
    }
    let g = base.grid_size();
    let (nf, nh) = (net.features, net.hidden);
    let act = forward(net, base);
    let mut dw1 = vec![0.0; net.w1.len()];
    let mut db1 = vec![0.0; nh];
    let mut dw2 = vec![0.0; net.w2.len()];
    let mut db2 = vec![0.0; nf];
    let mut dhidden = vec![0.0; act.hidden.len()];
    // Second layer: out[o] = b2 + sum w2 * hidden[src].
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let o = ((z * g + y) * g + x) * nf;
                let dout = &grid_grad[o..o + nf];
                for (d, v) in db2.iter_mut().zip(dout) {
                    *d += v;
                }
                for_taps(g, x, y, z, |tap, src| {
                    for co in 0..nf {
                        let d = dout[co];
                        if d == 0.0 {
                            continue;
                        }
                        for ci in 0..nh {
                            let wi = (co * nh + ci) * TAPS + tap;
                            dw2[wi] += d * act.hidden[src * nh + ci];
                            dhidden[src * nh + ci] += d * net.w2[wi];
                        }
                    }
                });
            }
        }
    }
    // Through tanh.
    let dpre: Vec<f64> = dhidden
        .iter()
        .zip(&act.hidden)
        .map(|(d, h)| d * (1.0 - h * h))
        .collect();
    let input = base.grid();
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let o = ((z * g + y) * g + x) * nh;
                let dout = &dpre[o..o + nh];
                for (d, v) in db1.iter_mut().zip(dout) {
                    *d += v;
                }
                for_taps(g, x, y, z, |tap, src| {
                    for co in 0..nh {
                        let d = dout[co];
                        if d == 0.0 {
                            continue;
                        }
                        for ci in 0..nf {
                            dw1[(co * nf + ci) * TAPS + tap] += d * input[src * nf + ci];
                        }
                    }
                });
            }
        }
    }
    Ok([dw1, db1, dw2, db2].concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{init_synthetic, ShapeSpec};

    #[test]
    fn fresh_net_is_identity() {
        let base = init_synthetic(ShapeSpec::TexturedSphere, 0);
        let net = TransformNet::new(4, 8, 1);
        assert!(net.is_identity());
        assert_eq!(apply_transform(&net, &base).unwrap(), base);
    }

    #[test]
    fn conv_matches_direct_sum_at_a_corner() {
        let g = 3;
        let input: Vec<f64> = (0..g * g * g).map(|i| i as f64).collect();
        let w: Vec<f64> = (0..TAPS).map(|t| t as f64 * 0.1).collect();
        let out = conv3d(&input, g, 1, &w, &[0.5], 1);
        // Cell (0,0,0) sees neighbours with dx,dy,dz in {1,2}.
        let mut expect = 0.5;
        for dz in 1..3 {
            for dy in 1..3 {
                for dx in 1..3 {
                    let src = ((dz - 1) * g + (dy - 1)) * g + (dx - 1);
                    expect += w[(dz * 3 + dy) * 3 + dx] * input[src];
                }
            }
        }
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn feature_mismatch_is_rejected() {
        let base = init_synthetic(ShapeSpec::Sphere, 0);
        let net = TransformNet::new(3, 4, 0);
        assert!(apply_transform(&net, &base).is_err());
    }
}
