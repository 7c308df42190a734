//! Score distillation, reference loss, geometry restoration and the
//! multi-view noise-resampling refinement loop.

mod mvnrs;
mod restore;

pub use mvnrs::{
    mvnrs_view_step, refine, refine_with, IterationMetrics, RefineOutcome, RefineTargets, ViewContext,
    ViewMetrics, ViewStepOutput,
};
pub use restore::{pretrain_gradient, restore_finetune, restore_loss, restore_pretrain, RestoreConfig, RestorePair};

use serde::Serialize;

use crate::diffusion::{LatentMap, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::field::FieldStack;
use crate::geometry::CameraView;
use crate::scene::{render, render_backward, RenderOptions, SceneParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientKind {
    DenoisedTarget,
    Retained,
    Reference,
}

/// Flat parameter gradient in [`SceneParams::to_flat`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub values: Vec<f64>,
    /// `None` for the reference gradient.
    pub source_view: Option<usize>,
    pub kind: GradientKind,
}

impl GradientRecord {
    pub fn new(values: Vec<f64>, source_view: Option<usize>, kind: GradientKind) -> Self {
        Self {
            values,
            source_view,
            kind,
        }
    }

    pub fn zeros(len: usize, kind: GradientKind) -> Self {
        Self::new(vec![0.0; len], None, kind)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientRecord, scale: f64) -> Result<()> {
        if other.len() != self.len() {
            return shape_err(format!("gradient lengths {} vs {}", self.len(), other.len()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Step-size schedule over iterations `1..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant { value: f64 },
    /// Half-cosine decay from `start` to `end`.
    Cosine { start: f64, end: f64 },
}

impl StepSchedule {
    pub fn at(&self, iteration: usize, steps: usize) -> f64 {
        match *self {
            StepSchedule::Constant { value } => value,
            StepSchedule::Cosine { start, end } => {
                let frac = if steps > 1 {
                    (iteration.saturating_sub(1)) as f64 / (steps - 1) as f64
                } else {
                    0.0
                };
                end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    fn is_positive(&self) -> bool {
        match *self {
            StepSchedule::Constant { value } => value > 0.0,
            StepSchedule::Cosine { start, end } => start > 0.0 && end > 0.0,
        }
    }
}

/// Settings of one refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub views: usize,
    pub pitch_range_deg: f64,
    pub radius: f64,
    pub focal: f64,
    pub resolution: usize,
    pub render: RenderOptions,
    pub latent: LatentMap,
    pub schedule: NoiseSchedule,
    /// Resampling radius around the anchors.
    pub sigma: f64,
    pub steps: usize,
    pub step_size: StepSchedule,
    pub seed: u64,
    /// Explicit-branch control weight of the conditioned denoiser.
    pub w_ex: f64,
    pub reference_weight: f64,
    pub view_weight: f64,
    /// Timesteps are drawn from `[t_min, t_max(s)]`, with the upper end
    /// moving linearly from `t_max_start` to `t_max_end`.
    pub t_min: f64,
    pub t_max_start: f64,
    pub t_max_end: f64,
    /// Transport the root noise along the chain (else independent noise).
    pub anchor_init: bool,
    /// Score-based retention (else always apply the resampled gradient and
    /// keep anchors fixed).
    pub retention: bool,
    /// Use the anchors as-is every iteration, without resampling.
    pub freeze_noise: bool,
    /// Also update the decoder; otherwise only the feature grid moves and
    /// decoder entries of every gradient are zero.
    pub optimize_decoder: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            views: 13,
            pitch_range_deg: 30.0,
            radius: 3.0,
            focal: 38.4,
            resolution: 32,
            render: RenderOptions {
                samples: 48,
                normals: false,
            },
            latent: LatentMap::Identity,
            schedule: NoiseSchedule::default(),
            sigma: 0.1,
            steps: 500,
            step_size: StepSchedule::Constant { value: 1e-2 },
            seed: 0,
            w_ex: 1.0,
            reference_weight: 1.0,
            view_weight: 1.0,
            t_min: 0.02,
            t_max_start: 0.98,
            t_max_end: 0.5,
            anchor_init: true,
            retention: true,
            freeze_noise: false,
            optimize_decoder: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.views < 1 {
            return bad("views must be >= 1".into());
        }
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if !self.step_size.is_positive() {
            return bad("step size must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma {} outside [0, 1]", self.sigma));
        }
        let ts = [self.t_min, self.t_max_start, self.t_max_end];
        if ts.iter().any(|t| !(0.0..=1.0).contains(t)) || self.t_min > self.t_max_start.min(self.t_max_end) {
            return bad("timestep range must satisfy 0 <= t_min <= t_max <= 1".into());
        }
        if !self.resolution.is_multiple_of(self.latent.factor()) {
            return bad("resolution must be divisible by the latent factor".into());
        }
        if self.render.samples < 1 {
            return bad("render samples must be >= 1".into());
        }
        Ok(())
    }

    /// Upper timestep bound at `iteration` (1-based).
    pub fn t_max(&self, iteration: usize) -> f64 {
        let frac = if self.steps > 1 {
            (iteration.saturating_sub(1)) as f64 / (self.steps - 1) as f64
        } else {
            0.0
        };
        self.t_max_start + (self.t_max_end - self.t_max_start) * frac
    }

    pub fn ring(&self) -> crate::views::RingSpec {
        crate::views::RingSpec {
            views: self.views,
            radius: self.radius,
            pitch_range_deg: self.pitch_range_deg,
            focal: self.focal,
            resolution: self.resolution,
        }
    }
}

/// `w_t J^T encode_adjoint(eps_pred - eps)`.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient(
    scene: &SceneParams,
    cam: &CameraView,
    opts: &RenderOptions,
    latent: &LatentMap,
    schedule: &NoiseSchedule,
    eps: &FieldStack,
    t: f64,
    eps_pred: &FieldStack,
) -> Result<GradientRecord> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    let residual = eps_pred.sub(eps)?;
    let image_grad = latent.encode_adjoint(&residual).scale(schedule.weight(t));
    let values = render_backward(scene, cam, opts, &image_grad)?;
    Ok(GradientRecord::new(values, None, GradientKind::DenoisedTarget))
}

/// Mean squared error between two images of equal shape.
pub fn image_loss(rendered: &FieldStack, denoised: &FieldStack) -> Result<f64> {
    rendered.expect_shape(denoised, "image_loss")?;
    Ok(rendered.sub(denoised)?.norm_sq() / rendered.data().len() as f64)
}

/// Cotangent of [`image_loss`] with respect to `rendered`.
pub(crate) fn image_loss_cotangent(rendered: &FieldStack, target: &FieldStack) -> Result<FieldStack> {
    rendered.expect_shape(target, "image_loss")?;
    Ok(rendered.sub(target)?.scale(2.0 / rendered.data().len() as f64))
}

/// Reference loss: MSE of the render from `ref_cam` against `ref_image`.
pub fn reference_loss_grad(
    scene: &SceneParams,
    ref_image: &FieldStack,
    ref_cam: &CameraView,
    opts: &RenderOptions,
) -> Result<(f64, GradientRecord)> {
    if ref_image.width() != ref_cam.width() || ref_image.height() != ref_cam.height() || ref_image.channels() != 3 {
        return Err(Error::Contract(format!(
            "reference image {}x{}x{} does not match {}x{} render",
            ref_image.width(),
            ref_image.height(),
            ref_image.channels(),
            ref_cam.width(),
            ref_cam.height()
        )));
    }
    let out = render(scene, ref_cam, &RenderOptions { normals: false, ..*opts })?;
    let loss = image_loss(&out.image, ref_image)?;
    let cot = image_loss_cotangent(&out.image, ref_image)?;
    let values = render_backward(scene, ref_cam, opts, &cot)?;
    Ok((loss, GradientRecord::new(values, None, GradientKind::Reference)))
}

/// Cosine of the angle between two gradients; 0 when both vanish.
pub fn consistency_score(a: &GradientRecord, b: &GradientRecord) -> Result<f64> {
    cosine(&a.values, &b.values)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err(format!("gradient lengths {} vs {}", a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = aa.sqrt() * bb.sqrt();
    Ok(if denom > 0.0 { ab / denom } else { 0.0 })
}

/// Peak signal-to-noise ratio for unit peak, capped at `cap` dB.
pub fn psnr(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        return cap;
    }
    (-10.0 * mse.log10()).min(cap)
}

/// PSNR cap used for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: &[f64]) -> GradientRecord {
        GradientRecord::new(v.to_vec(), None, GradientKind::Retained)
    }

    #[test]
    fn cosine_examples() {
        let s = consistency_score(&rec(&[1.0, 2.0, 3.0]), &rec(&[4.0, 5.0, 6.0])).unwrap();
        assert!((s - 32.0 / (14f64.sqrt() * 77f64.sqrt())).abs() < 1e-12);
        assert_eq!(consistency_score(&rec(&[0.0; 3]), &rec(&[0.0; 3])).unwrap(), 0.0);
        assert_eq!(consistency_score(&rec(&[1.0, 0.0]), &rec(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(consistency_score(&rec(&[1.0]), &rec(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn image_loss_of_constant_offset() {
        let a = FieldStack::filled(3, 2, 3, 0.25);
        let b = FieldStack::filled(3, 2, 3, 0.75);
        assert!((image_loss(&a, &b).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(image_loss(&a, &a).unwrap(), 0.0);
        assert!(image_loss(&a, &FieldStack::zeros(2, 2, 3)).is_err());
    }

    #[test]
    fn psnr_caps_identical_images() {
        assert_eq!(psnr(0.0, PSNR_CAP), 99.0);
        assert!((psnr(1e-3, PSNR_CAP) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let c = StepSchedule::Cosine { start: 1.0, end: 0.1 };
        assert_eq!(c.at(1, 11), 1.0);
        assert!((c.at(11, 11) - 0.1).abs() < 1e-12);
        let cfg = RefineConfig { steps: 5, ..Default::default() };
        assert_eq!(cfg.t_max(1), 0.98);
        assert!((cfg.t_max(5) - 0.5).abs() < 1e-12);
        assert!(RefineConfig { views: 0, ..Default::default() }.validate().is_err());
        assert!(RefineConfig { sigma: 1.5, ..Default::default() }.validate().is_err());
        RefineConfig::default().validate().unwrap();
    }
}
