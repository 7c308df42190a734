//! Noise schedule, forward noising and a closed-form denoiser.
//!
//! The denoiser is the exact posterior-mean predictor for a Gaussian data
//! model `z0 ~ N(mu, tau^2 I)`, so every noise prediction it makes has an
//! analytic reference.

use crate::error::{Error, Result};
use crate::field::FieldStack;

/// Cosine schedule `alpha(t) = cos^2(pi t / 2)` clamped to
/// `[min_alpha, max_alpha]`, with SDS weight `w(t) = 1 - alpha(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub min_alpha: f64,
    pub max_alpha: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            min_alpha: 1e-4,
            max_alpha: 1.0 - 1e-4,
        }
    }
}

impl NoiseSchedule {
    /// The cosine schedule without clamping, so `alpha(0) == 1`.
    pub fn unclamped() -> Self {
        Self {
            min_alpha: 0.0,
            max_alpha: 1.0,
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        let c = (std::f64::consts::FRAC_PI_2 * t).cos();
        (c * c).clamp(self.min_alpha, self.max_alpha)
    }

    pub fn weight(&self, t: f64) -> f64 {
        1.0 - self.alpha(t)
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Gaussian per-view image model: mean `mu` (in latent space), isotropic
/// standard deviation `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianImageModel {
    pub mean: FieldStack,
    pub stddev: f64,
}

impl GaussianImageModel {
    pub fn new(mean: FieldStack, stddev: f64) -> Result<Self> {
        if !(stddev >= 0.0) || !stddev.is_finite() {
            return Err(Error::Contract(format!("model stddev must be >= 0, got {stddev}")));
        }
        if mean.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("model mean must be finite".into()));
        }
        Ok(Self { mean, stddev })
    }

    pub fn with_mean(&self, mean: FieldStack) -> Self {
        Self {
            mean,
            stddev: self.stddev,
        }
    }
}

/// Fixed per-pixel map between image and latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentMap {
    #[default]
    Identity,
    /// 2x average-pool encode, nearest-neighbour decode.
    AvgPool2,
}

impl LatentMap {
    pub fn factor(&self) -> usize {
        match self {
            LatentMap::Identity => 1,
            LatentMap::AvgPool2 => 2,
        }
    }

    pub fn encode(&self, image: &FieldStack) -> Result<FieldStack> {
        match self {
            LatentMap::Identity => Ok(image.clone().without_mask()),
            LatentMap::AvgPool2 => image.avg_pool(2),
        }
    }

    pub fn decode(&self, latent: &FieldStack) -> FieldStack {
        match self {
            LatentMap::Identity => latent.clone(),
            LatentMap::AvgPool2 => latent.upsample_nearest(2),
        }
    }

    /// Adjoint of `encode`: pulls a latent-space cotangent back to image space.
    pub fn encode_adjoint(&self, latent_grad: &FieldStack) -> FieldStack {
        match self {
            LatentMap::Identity => latent_grad.clone(),
            LatentMap::AvgPool2 => latent_grad.upsample_nearest(2).scale(0.25),
        }
    }
}

/// `sqrt(alpha_t) z + sqrt(1 - alpha_t) eps`.
pub fn add_noise(z: &FieldStack, eps: &FieldStack, t: f64, schedule: &NoiseSchedule) -> Result<FieldStack> {
    check_t(t)?;
    let a = schedule.alpha(t);
    z.axpby(a.sqrt(), eps, (1.0 - a).sqrt())
}

/// Exact noise prediction for the Gaussian model:
/// `eps_hat = (z_t - sqrt(a) E[z0 | z_t]) / sqrt(1 - a)` with
/// `E[z0 | z_t] = mu + sqrt(a) tau^2 / (a tau^2 + 1 - a) (z_t - sqrt(a) mu)`.
pub fn oracle_epsilon(
    z_t: &FieldStack,
    t: f64,
    model: &GaussianImageModel,
    schedule: &NoiseSchedule,
) -> Result<FieldStack> {
    check_t(t)?;
    z_t.expect_shape(&model.mean, "oracle_epsilon")?;
    let a = schedule.alpha(t);
    let one_minus = 1.0 - a;
    if one_minus < 1e-12 {
        return Err(Error::DegenerateTimestep {
            t,
            reason: "1 - alpha_t below 1e-12",
        });
    }
    let (sa, s1) = (a.sqrt(), one_minus.sqrt());
    let tau2 = model.stddev * model.stddev;
    let gain = sa * tau2 / (a * tau2 + one_minus);
    let data = z_t
        .data()
        .iter()
        .zip(model.mean.data())
        .map(|(&zt, &mu)| {
            let post_mean = mu + gain * (zt - sa * mu);
            (zt - sa * post_mean) / s1
        })
        .collect();
    FieldStack::from_data(z_t.width(), z_t.height(), z_t.channels(), data)
}

/// One-step clean-sample estimate `(z_t - sqrt(1 - a) eps_hat) / sqrt(a)`,
/// decoded to image space.
pub fn predict_x0(
    z_t: &FieldStack,
    eps_hat: &FieldStack,
    t: f64,
    schedule: &NoiseSchedule,
    latent: &LatentMap,
) -> Result<FieldStack> {
    check_t(t)?;
    let a = schedule.alpha(t);
    if a < 1e-12 {
        return Err(Error::DegenerateTimestep {
            t,
            reason: "alpha_t below 1e-12",
        });
    }
    let z0 = z_t.axpby(1.0 / a.sqrt(), eps_hat, -(1.0 - a).sqrt() / a.sqrt())?;
    Ok(latent.decode(&z0))
}
