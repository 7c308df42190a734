//! Hybrid explicit/implicit multi-view conditioning.
//!
//! * The explicit branch sees the reference projected into the target view
//!   (`z_proj`, merged with the target's rendered normals and colours), the
//!   projected silhouette and the noisy latent. Its per-level features are
//!   added to the (frozen) base features through zero-initialised
//!   projections scaled by `w_ex`.
//! * The implicit branch sees the un-warped driving latent and the noisy
//!   latent; its features are splatted into the target view and merged
//!   into the explicit features by residual blocks with zero-initialised
//!   output layers.
//!
//! The denoiser stays analytic: the injected features, folded back to
//! latent resolution, shift the Gaussian model's mean. With every
//! zero-initialised map untouched the whole stack is an exact no-op.

use crate::diffusion::{oracle_epsilon, GaussianImageModel, LatentMap, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::field::FieldStack;
use crate::geometry::{downsample_depth_min, warp_view, CameraView, WarpResult};
use crate::scene::RenderOutput;
use crate::{container, seed};

use rand_distr::{Distribution, Normal};

/// Number of feature levels per branch; level `l` runs at `1/2^l` of the
/// latent resolution.
pub const LEVELS: usize = 3;

const MAGIC: &[u8; 4] = b"HPDM";

/// Flat parameter access used for serialisation and training.
trait Flat {
    fn push_params(&self, out: &mut Vec<f64>);
    fn pull_params(&mut self, src: &mut std::slice::Iter<'_, f64>) -> Result<()>;
}

fn pull(dst: &mut [f64], src: &mut std::slice::Iter<'_, f64>) -> Result<()> {
    for d in dst {
        *d = *src
            .next()
            .ok_or_else(|| Error::Format("parameter payload too short".into()))?;
    }
    Ok(())
}

fn gaussian_vec(n: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Per-pixel affine map (a 1x1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLinear {
    cin: usize,
    cout: usize,
    /// `[cout][cin]`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl PixelLinear {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![0.0; cin * cout],
            bias: vec![0.0; cout],
        }
    }

    pub fn random(cin: usize, cout: usize, seed: u64) -> Self {
        Self {
            weight: gaussian_vec(cin * cout, (1.0 / cin as f64).sqrt(), seed),
            ..Self::zeros(cin, cout)
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|&v| v == 0.0)
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    fn apply_px(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let row = &self.weight[o * self.cin..(o + 1) * self.cin];
            *y = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn apply(&self, input: &FieldStack) -> Result<FieldStack> {
        if input.channels() != self.cin {
            return shape_err(format!("pixel linear expects {} channels, got {}", self.cin, input.channels()));
        }
        let mut out = FieldStack::zeros(input.width(), input.height(), self.cout);
        for (x, y) in input
            .data()
            .chunks_exact(self.cin)
            .zip(out.data_mut().chunks_exact_mut(self.cout))
        {
            self.apply_px(x, y);
        }
        Ok(out)
    }
}

impl Flat for PixelLinear {
    fn push_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn pull_params(&mut self, src: &mut std::slice::Iter<'_, f64>) -> Result<()> {
        pull(&mut self.weight, src)?;
        pull(&mut self.bias, src)
    }
}

/// Residual merge `x + L2(tanh(L1([x, y])))` with `L2` zero-initialised.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeBlock {
    first: usize,
    second: usize,
    l1: PixelLinear,
    l2: PixelLinear,
}

/// Intermediate values of a merge, kept for the backward pass.
struct MergeCache {
    input: FieldStack,
    hidden: FieldStack,
}

impl MergeBlock {
    pub fn new(first: usize, second: usize, hidden: usize, seed: u64) -> Self {
        Self {
            first,
            second,
            l1: PixelLinear::random(first + second, hidden, seed),
            l2: PixelLinear::zeros(hidden, first),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.l2.is_zero()
    }

    pub fn output_layer_mut(&mut self) -> &mut PixelLinear {
        &mut self.l2
    }

    pub fn forward(&self, x: &FieldStack, y: &FieldStack) -> Result<FieldStack> {
        Ok(self.forward_cached(x, y)?.0)
    }

    fn forward_cached(&self, x: &FieldStack, y: &FieldStack) -> Result<(FieldStack, MergeCache)> {
        if x.channels() != self.first || y.channels() != self.second {
            return shape_err(format!(
                "merge block expects {}+{} channels, got {}+{}",
                self.first,
                self.second,
                x.channels(),
                y.channels()
            ));
        }
        let input = FieldStack::concat_channels(&[x, y])?;
        let hidden = self.l1.apply(&input)?.map(f64::tanh);
        let out = x.clone().without_mask().add(&self.l2.apply(&hidden)?)?;
        Ok((out, MergeCache { input, hidden }))
    }

    /// Accumulates parameter gradients (l1 then l2, flat order) given the
    /// output cotangent.
    fn backward(&self, cache: &MergeCache, dout: &FieldStack, grad: &mut [f64]) {
        let (h, cin) = (self.l1.cout, self.l1.cin);
        let (g1, g2) = grad.split_at_mut(h * cin + h);
        let (g1w, g1b) = g1.split_at_mut(h * cin);
        let (g2w, g2b) = g2.split_at_mut(self.first * h);
        let mut dh = vec![0.0; h];
        for ((x, a), d) in cache
            .input
            .data()
            .chunks_exact(cin)
            .zip(cache.hidden.data().chunks_exact(h))
            .zip(dout.data().chunks_exact(self.first))
        {
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                g2b[o] += dv;
                for j in 0..h {
                    g2w[o * h + j] += dv * a[j];
                    dh[j] += dv * self.l2.weight[o * h + j];
                }
            }
            for j in 0..h {
                let dp = dh[j] * (1.0 - a[j] * a[j]);
                if dp == 0.0 {
                    continue;
                }
                g1b[j] += dp;
                for (i, &xv) in x.iter().enumerate() {
                    g1w[j * cin + i] += dp * xv;
                }
            }
        }
    }

    fn param_count(&self) -> usize {
        self.l1.weight.len() + self.l1.bias.len() + self.l2.weight.len() + self.l2.bias.len()
    }
}

impl Flat for MergeBlock {
    fn push_params(&self, out: &mut Vec<f64>) {
        self.l1.push_params(out);
        self.l2.push_params(out);
    }

    fn pull_params(&mut self, src: &mut std::slice::Iter<'_, f64>) -> Result<()> {
        self.l1.pull_params(src)?;
        self.l2.pull_params(src)
    }
}

/// 3x3 "same" convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
struct Conv2d {
    cin: usize,
    cout: usize,
    /// `[cout][cin][9]`
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    fn random(cin: usize, cout: usize, seed: u64) -> Self {
        Self {
            cin,
            cout,
            weight: gaussian_vec(cin * cout * 9, (1.0 / (9 * cin) as f64).sqrt(), seed),
            bias: vec![0.0; cout],
        }
    }

    fn forward_tanh(&self, input: &FieldStack) -> FieldStack {
        let (w, h) = (input.width(), input.height());
        let mut out = FieldStack::zeros(w, h, self.cout);
        for y in 0..h {
            for x in 0..w {
                let dst = out.pixel_mut(x, y);
                dst.copy_from_slice(&self.bias);
                for dy in 0..3 {
                    let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < h) else { continue };
                    for dx in 0..3 {
                        let Some(sx) = (x + dx).checked_sub(1).filter(|&v| v < w) else { continue };
                        let tap = dy * 3 + dx;
                        let src = input.pixel(sx, sy);
                        for (co, d) in dst.iter_mut().enumerate() {
                            let base = co * self.cin * 9;
                            *d += src
                                .iter()
                                .enumerate()
                                .map(|(ci, v)| self.weight[base + ci * 9 + tap] * v)
                                .sum::<f64>();
                        }
                    }
                }
                dst.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        out
    }
}

impl Flat for Conv2d {
    fn push_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn pull_params(&mut self, src: &mut std::slice::Iter<'_, f64>) -> Result<()> {
        pull(&mut self.weight, src)?;
        pull(&mut self.bias, src)
    }
}

/// Per-level feature grids produced by a branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub layers: Vec<FieldStack>,
}

impl BranchOutput {
    pub fn zeros_like(other: &BranchOutput, channels: usize) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| FieldStack::zeros(l.width(), l.height(), channels))
                .collect(),
        }
    }

    fn check_against(&self, other: &BranchOutput, what: &str) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self.layers.iter().zip(&other.layers).any(|(a, b)| !a.same_extent(b))
        {
            return shape_err(format!("{what}: branch layer shapes disagree"));
        }
        Ok(())
    }
}

/// Fixed convolutional feature extractor: two 3x3 conv + tanh layers per
/// level, 2x average pooling between levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    in_channels: usize,
    width: usize,
    layers: Vec<(Conv2d, Conv2d)>,
}

impl ConvBranch {
    pub fn new(in_channels: usize, width: usize, seed: u64) -> Self {
        let layers = (0..LEVELS)
            .map(|l| {
                let cin = if l == 0 { in_channels } else { width };
                (
                    Conv2d::random(cin, width, seed::derive(seed, "branch", &[l as u64, 0])),
                    Conv2d::random(width, width, seed::derive(seed, "branch", &[l as u64, 1])),
                )
            })
            .collect();
        Self {
            in_channels,
            width,
            layers,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, input: &FieldStack) -> Result<BranchOutput> {
        if input.channels() != self.in_channels {
            return shape_err(format!(
                "branch expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            ));
        }
        let k = 1 << (LEVELS - 1);
        if !input.width().is_multiple_of(k) || !input.height().is_multiple_of(k) {
            return Err(Error::Contract(format!(
                "branch input {}x{} must be divisible by {k}",
                input.width(),
                input.height()
            )));
        }
        let mut out = Vec::with_capacity(LEVELS);
        let mut x = input.clone().without_mask();
        for (l, (a, b)) in self.layers.iter().enumerate() {
            if l > 0 {
                x = x.avg_pool(2)?;
            }
            x = b.forward_tanh(&a.forward_tanh(&x));
            out.push(x.clone());
        }
        Ok(BranchOutput { layers: out })
    }
}

impl Flat for ConvBranch {
    fn push_params(&self, out: &mut Vec<f64>) {
        for (a, b) in &self.layers {
            a.push_params(out);
            b.push_params(out);
        }
    }

    fn pull_params(&mut self, src: &mut std::slice::Iter<'_, f64>) -> Result<()> {
        for (a, b) in &mut self.layers {
            a.pull_params(src)?;
            b.pull_params(src)?;
        }
        Ok(())
    }
}

/// Conditions for one target view, at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStack {
    /// Projected reference latent after the geometry merge.
    pub z_proj: FieldStack,
    /// Projected auxiliary mask, zero on void pixels.
    pub s_proj: FieldStack,
    /// Encoded `[normal, image]` of the target's coarse render.
    pub geo: FieldStack,
    /// Latent pixels fully covered by the projected reference.
    pub reference_valid: Vec<bool>,
}

/// `z_proj = geo_merge(encode(reference warp), encode([normal, image]))`,
/// `s_proj = encode(mask warp with voids at 0)`.
pub fn build_condition(
    ref_warp: &WarpResult,
    mask_warp: &WarpResult,
    render: &RenderOutput,
    latent: &LatentMap,
    geo_merge: &MergeBlock,
) -> Result<ConditionStack> {
    if !ref_warp.warped.same_extent(&render.image) || !mask_warp.warped.same_extent(&render.image) {
        return shape_err("build_condition: warps and render differ in resolution");
    }
    let z_ref = latent.encode(&ref_warp.warped)?;
    let geo = latent.encode(&FieldStack::concat_channels(&[&render.normal, &render.image])?)?;
    let z_proj = geo_merge.forward(&z_ref, &geo)?;
    let mut mask = mask_warp.warped.clone().without_mask();
    let c = mask.channels();
    for (i, &v) in mask_warp.void_mask.iter().enumerate() {
        if v {
            mask.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let s_proj = latent.encode(&mask)?;
    let coverage = FieldStack::from_data(
        render.image.width(),
        render.image.height(),
        1,
        ref_warp.void_mask.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect(),
    )?;
    let reference_valid = latent
        .encode(&coverage)?
        .data()
        .iter()
        .map(|&c| c >= 1.0 - 1e-12)
        .collect();
    Ok(ConditionStack {
        z_proj,
        s_proj,
        geo,
        reference_valid,
    })
}

/// `out_l = base_l + w_ex * zero_proj_l(explicit_l)` for every level.
pub fn explicit_inject(
    base: &BranchOutput,
    explicit: &BranchOutput,
    w_ex: f64,
    zero_proj: &[PixelLinear],
) -> Result<BranchOutput> {
    base.check_against(explicit, "explicit_inject")?;
    if zero_proj.len() != base.layers.len() {
        return shape_err("explicit_inject: one projection per level required");
    }
    let layers = base
        .layers
        .iter()
        .zip(&explicit.layers)
        .zip(zero_proj)
        .map(|((b, e), z)| {
            let p = z.apply(e)?;
            b.axpby(1.0, &p, w_ex)
        })
        .collect::<Result<_>>()?;
    Ok(BranchOutput { layers })
}

/// Implicit-branch features splatted into the target view, ready to merge.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportedImplicit {
    pub warped: BranchOutput,
    pub void_masks: Vec<Vec<bool>>,
}

/// Warps every implicit level from `src` to `dst` through `driving_depth`
/// (latent resolution, nearest surface kept when downsampling). Voids are 0.
pub fn implicit_transport(
    implicit: &BranchOutput,
    driving_depth: &FieldStack,
    src: &CameraView,
    dst: &CameraView,
) -> Result<TransportedImplicit> {
    let mut layers = Vec::with_capacity(implicit.layers.len());
    let mut voids = Vec::with_capacity(implicit.layers.len());
    for (l, feat) in implicit.layers.iter().enumerate() {
        let k = 1 << l;
        let depth = downsample_depth_min(driving_depth, k)?;
        let warp = warp_view(feat, &depth, &src.downscaled(k)?, &dst.downscaled(k)?)?;
        layers.push(warp.warped.without_mask());
        voids.push(warp.void_mask);
    }
    Ok(TransportedImplicit {
        warped: BranchOutput { layers },
        void_masks: voids,
    })
}

impl TransportedImplicit {
    /// `merge_l(explicit_l, warped implicit_l)` per level.
    pub fn merge(&self, explicit_in: &BranchOutput, merges: &[MergeBlock]) -> Result<BranchOutput> {
        explicit_in.check_against(&self.warped, "implicit merge")?;
        if merges.len() != explicit_in.layers.len() {
            return shape_err("implicit merge: one block per level required");
        }
        let layers = explicit_in
            .layers
            .iter()
            .zip(&self.warped.layers)
            .zip(merges)
            .map(|((e, i), m)| m.forward(e, i))
            .collect::<Result<_>>()?;
        Ok(BranchOutput { layers })
    }
}

/// Per-call inputs of the hybrid denoiser (all at latent resolution).
#[derive(Debug, Clone, Copy)]
pub struct HybridInputs<'a> {
    pub cond: &'a ConditionStack,
    pub driving_latent: &'a FieldStack,
    pub driving_depth: &'a FieldStack,
    pub src: &'a CameraView,
    pub dst: &'a CameraView,
}

/// All conditioning blocks plus the control weight.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPrior {
    latent_channels: usize,
    width: usize,
    hidden: usize,
    pub explicit: ConvBranch,
    pub implicit: ConvBranch,
    pub zero_proj: Vec<PixelLinear>,
    pub merges: Vec<MergeBlock>,
    pub geo_merge: MergeBlock,
    pub w_ex: f64,
}

/// Channels of the geometry condition: encoded normal (3) + image (3).
pub const GEO_CHANNELS: usize = 6;

impl HybridPrior {
    /// Fresh blocks: random fixed branches, every output-side map at zero.
    pub fn new(latent_channels: usize, width: usize, hidden: usize, w_ex: f64, seed: u64) -> Self {
        let s = |name: &str, i: u64| seed::derive(seed, name, &[i]);
        Self {
            latent_channels,
            width,
            hidden,
            explicit: ConvBranch::new(2 * latent_channels + 1, width, s("explicit", 0)),
            implicit: ConvBranch::new(2 * latent_channels, width, s("implicit", 0)),
            zero_proj: (0..LEVELS).map(|_| PixelLinear::zeros(width, latent_channels)).collect(),
            merges: (0..LEVELS)
                .map(|l| MergeBlock::new(width, width, hidden, s("merge", l as u64)))
                .collect(),
            geo_merge: MergeBlock::new(latent_channels, GEO_CHANNELS, hidden, s("geo", 0)),
            w_ex,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// True when the injected mean shift is identically zero.
    pub fn is_transparent(&self) -> bool {
        self.w_ex == 0.0 || self.zero_proj.iter().all(PixelLinear::is_zero)
    }

    fn features(&self, z_t: &FieldStack, inputs: &HybridInputs) -> Result<(BranchOutput, TransportedImplicit)> {
        let ex_in = FieldStack::concat_channels(&[&inputs.cond.z_proj, &inputs.cond.s_proj, z_t])?;
        let explicit = self.explicit.forward(&ex_in)?;
        let im_in = FieldStack::concat_channels(&[inputs.driving_latent, z_t])?;
        let implicit = self.implicit.forward(&im_in)?;
        let transported = implicit_transport(&implicit, inputs.driving_depth, inputs.src, inputs.dst)?;
        Ok((explicit, transported))
    }

    /// Mean shift produced by the injection stack, at latent resolution:
    /// the sum over levels of the nearest-upsampled injected features.
    pub fn injection_shift(&self, z_t: &FieldStack, inputs: &HybridInputs) -> Result<FieldStack> {
        let (explicit, transported) = self.features(z_t, inputs)?;
        let merged = transported.merge(&explicit, &self.merges)?;
        let base = BranchOutput::zeros_like(&merged, self.latent_channels);
        let injected = explicit_inject(&base, &merged, self.w_ex, &self.zero_proj)?;
        fold(&injected, z_t)
    }

    /// Serialises all blocks with the `HPDM` container.
    pub fn write_to(&self, w: impl std::io::Write) -> Result<()> {
        let mut payload = vec![self.w_ex];
        self.push_all(&mut payload);
        let dims = [self.latent_channels, self.width, self.hidden, LEVELS].map(|d| d as u32);
        container::write(w, MAGIC, &dims, &payload)
    }

    pub fn read_from(r: impl std::io::Read) -> Result<HybridPrior> {
        let (dims, payload) = container::read(r, MAGIC)?;
        let [lat, width, hidden, levels] = dims[..] else {
            return Err(Error::Format("HPDM header must have 4 dims".into()));
        };
        if levels as usize != LEVELS {
            return Err(Error::Format(format!("HPDM with {levels} levels unsupported")));
        }
        let mut prior = HybridPrior::new(lat as usize, width as usize, hidden as usize, 0.0, 0);
        let mut it = payload.iter();
        prior.w_ex = *it.next().ok_or_else(|| Error::Format("empty HPDM payload".into()))?;
        prior.pull_all(&mut it)?;
        if it.next().is_some() {
            return Err(Error::Format("HPDM payload too long".into()));
        }
        Ok(prior)
    }

    fn push_all(&self, out: &mut Vec<f64>) {
        self.explicit.push_params(out);
        self.implicit.push_params(out);
        self.zero_proj.iter().for_each(|z| z.push_params(out));
        self.merges.iter().for_each(|m| m.push_params(out));
        self.geo_merge.push_params(out);
    }

    fn pull_all(&mut self, it: &mut std::slice::Iter<'_, f64>) -> Result<()> {
        self.explicit.pull_params(it)?;
        self.implicit.pull_params(it)?;
        for z in &mut self.zero_proj {
            z.pull_params(it)?;
        }
        for m in &mut self.merges {
            m.pull_params(it)?;
        }
        self.geo_merge.pull_params(it)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<HybridPrior> {
        HybridPrior::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn fold(injected: &BranchOutput, like: &FieldStack) -> Result<FieldStack> {
    let mut shift = FieldStack::zeros(like.width(), like.height(), like.channels());
    for (l, layer) in injected.layers.iter().enumerate() {
        shift = shift.add(&layer.upsample_nearest(1 << l))?;
    }
    Ok(shift)
}

/// Noise prediction of the conditioned denoiser: the closed-form oracle
/// with its mean moved by [`HybridPrior::injection_shift`].
pub fn hybrid_epsilon(
    z_t: &FieldStack,
    t: f64,
    schedule: &NoiseSchedule,
    model: &GaussianImageModel,
    prior: &HybridPrior,
    inputs: &HybridInputs,
) -> Result<FieldStack> {
    let shift = prior.injection_shift(z_t, inputs)?;
    let shifted = model.with_mean(model.mean.add(&shift)?);
    oracle_epsilon(z_t, t, &shifted, schedule)
}

/// Everything needed to evaluate the conditioned denoiser on one noisy
/// latent, owned so it can be kept across training steps.
#[derive(Debug, Clone)]
pub struct HybridSample {
    pub cond: ConditionStack,
    pub driving_latent: FieldStack,
    pub driving_depth: FieldStack,
    pub src: CameraView,
    pub dst: CameraView,
    pub z_t: FieldStack,
    pub t: f64,
    pub model: GaussianImageModel,
}

impl HybridSample {
    pub fn inputs(&self) -> HybridInputs<'_> {
        HybridInputs {
            cond: &self.cond,
            driving_latent: &self.driving_latent,
            driving_depth: &self.driving_depth,
            src: &self.src,
            dst: &self.dst,
        }
    }

    /// Mean squared distance between the one-step clean estimate and the
    /// projected reference, over latent pixels the reference covers.
    pub fn reference_error(&self, prior: &HybridPrior, schedule: &NoiseSchedule) -> Result<f64> {
        let eps = hybrid_epsilon(&self.z_t, self.t, schedule, &self.model, prior, &self.inputs())?;
        let x0 = crate::diffusion::predict_x0(&self.z_t, &eps, self.t, schedule, &LatentMap::Identity)?;
        Ok(masked_mse(&x0, &self.cond.z_proj, &self.cond.reference_valid).0)
    }
}

/// Mean squared error over masked-in pixels, and the pixel-sample count.
fn masked_mse(a: &FieldStack, b: &FieldStack, mask: &[bool]) -> (f64, usize) {
    let c = a.channels();
    let mut sum = 0.0;
    let mut n = 0;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for k in 0..c {
                let d = a.data()[i * c + k] - b.data()[i * c + k];
                sum += d * d;
            }
            n += c;
        }
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, n)
}

impl HybridPrior {
    /// Trains the zero-initialised projections and the implicit merge
    /// blocks by gradient descent so that the one-step clean estimate moves
    /// towards the projected reference on covered pixels. Branches and the
    /// geometry merge stay fixed. Returns the mean loss before each step.
    pub fn train_towards_reference(
        &mut self,
        samples: &[HybridSample],
        schedule: &NoiseSchedule,
        steps: usize,
        learning_rate: f64,
    ) -> Result<Vec<f64>> {
        // Branch features do not depend on the trained parameters.
        let feats = samples
            .iter()
            .map(|s| self.features(&s.z_t, &s.inputs()))
            .collect::<Result<Vec<_>>>()?;
        let merge_len: usize = self.merges.iter().map(MergeBlock::param_count).sum();
        let proj_len = self.zero_proj.iter().map(|z| z.weight.len() + z.bias.len()).sum::<usize>();
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut g_proj = vec![0.0; proj_len];
            let mut g_merge = vec![0.0; merge_len];
            let mut loss = 0.0;
            for (s, (explicit, transported)) in samples.iter().zip(&feats) {
                let a = schedule.alpha(s.t);
                let tau2 = s.model.stddev.powi(2);
                let gain = a.sqrt() * tau2 / (a * tau2 + 1.0 - a);
                // x0 = (1 - gain sqrt(a)) (mu + shift) + gain z_t
                let coef = 1.0 - gain * a.sqrt();
                let mut merged = Vec::with_capacity(LEVELS);
                let mut caches = Vec::with_capacity(LEVELS);
                for ((e, i), m) in explicit.layers.iter().zip(&transported.warped.layers).zip(&self.merges) {
                    let (out, cache) = m.forward_cached(e, i)?;
                    merged.push(out);
                    caches.push(cache);
                }
                let merged = BranchOutput { layers: merged };
                let base = BranchOutput::zeros_like(&merged, self.latent_channels);
                let injected = explicit_inject(&base, &merged, self.w_ex, &self.zero_proj)?;
                let shift = fold(&injected, &s.z_t)?;
                let x0 = s.model.mean.add(&shift)?.axpby(coef, &s.z_t, gain)?;
                let (l, n) = masked_mse(&x0, &s.cond.z_proj, &s.cond.reference_valid);
                loss += l / samples.len() as f64;
                if n == 0 {
                    continue;
                }
                let c = x0.channels();
                let scale = 2.0 * coef / (n as f64 * samples.len() as f64);
                let mut dshift = FieldStack::zeros(x0.width(), x0.height(), c);
                for (i, &m) in s.cond.reference_valid.iter().enumerate() {
                    if m {
                        for k in 0..c {
                            dshift.data_mut()[i * c + k] =
                                scale * (x0.data()[i * c + k] - s.cond.z_proj.data()[i * c + k]);
                        }
                    }
                }
                let mut proj_off = 0;
                let mut merge_off = 0;
                for (l, ((z, m), cache)) in self.zero_proj.iter().zip(&self.merges).zip(&caches).enumerate() {
                    let k = 1 << l;
                    let feat = &merged.layers[l];
                    let dout = dshift.avg_pool(k)?.scale((k * k) as f64);
                    let gz = &mut g_proj[proj_off..proj_off + z.weight.len() + z.bias.len()];
                    let (gw, gb) = gz.split_at_mut(z.weight.len());
                    let mut dmerged = FieldStack::zeros(feat.width(), feat.height(), feat.channels());
                    for ((d, f), dm) in dout
                        .data()
                        .chunks_exact(z.cout)
                        .zip(feat.data().chunks_exact(z.cin))
                        .zip(dmerged.data_mut().chunks_exact_mut(z.cin))
                    {
                        for (o, &dv) in d.iter().enumerate() {
                            let dv = dv * self.w_ex;
                            gb[o] += dv;
                            for ci in 0..z.cin {
                                gw[o * z.cin + ci] += dv * f[ci];
                                dm[ci] += dv * z.weight[o * z.cin + ci];
                            }
                        }
                    }
                    let mlen = m.param_count();
                    m.backward(cache, &dmerged, &mut g_merge[merge_off..merge_off + mlen]);
                    proj_off += z.weight.len() + z.bias.len();
                    merge_off += mlen;
                }
            }
            history.push(loss);
            let mut proj = Vec::with_capacity(proj_len);
            self.zero_proj.iter().for_each(|z| z.push_params(&mut proj));
            for (p, g) in proj.iter_mut().zip(&g_proj) {
                *p -= learning_rate * g;
            }
            let mut it = proj.iter();
            for z in &mut self.zero_proj {
                z.pull_params(&mut it)?;
            }
            let mut mp = Vec::with_capacity(merge_len);
            self.merges.iter().for_each(|m| m.push_params(&mut mp));
            for (p, g) in mp.iter_mut().zip(&g_merge) {
                *p -= learning_rate * g;
            }
            let mut it = mp.iter();
            for m in &mut self.merges {
                m.pull_params(&mut it)?;
            }
        }
        Ok(history)
    }
}
