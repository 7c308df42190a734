use rand::Rng;

use super::{image_loss, sds_gradient};
use crate::diffusion::{add_noise, oracle_epsilon, GaussianImageModel, LatentMap, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::scene::{apply_transform, render, transform_backward, RenderOptions, SceneParams, TransformNet};
use crate::seed;
use crate::views::{camera_ring, RingSpec};

/// A coarse scene and the scene whose renders act as oracle means for it.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorePair {
    pub base: SceneParams,
    pub target: SceneParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub step_size: f64,
    pub finetune_step_size: f64,
    /// Random views per scene and step.
    pub views_per_step: usize,
    pub tau: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
    pub ring: RingSpec,
    pub render: RenderOptions,
    pub latent: LatentMap,
    pub schedule: NoiseSchedule,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 100,
            finetune_steps: 50,
            step_size: 1e-2,
            finetune_step_size: 1e-2,
            views_per_step: 2,
            tau: 0.0,
            t_min: 0.02,
            t_max: 0.98,
            seed: 0,
            ring: RingSpec {
                views: 8,
                resolution: 16,
                focal: 19.2,
                ..RingSpec::default()
            },
            render: RenderOptions {
                samples: 32,
                normals: false,
            },
            latent: LatentMap::Identity,
            schedule: NoiseSchedule::default(),
        }
    }
}

const PRETRAIN: u64 = 0;
const FINETUNE: u64 = 1;

/// Random camera over the full azimuth circle and the configured pitch range.
fn random_view(cfg: &RestoreConfig, phase: u64, step: usize, scene: usize, j: usize) -> Result<(CameraView, f64, u64)> {
    let idx = [phase, step as u64, scene as u64, j as u64];
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::VIEWS, &idx));
    let az = rng.gen_range(0.0..360.0);
    let p = cfg.ring.pitch_range_deg;
    let pitch = if p > 0.0 { rng.gen_range(-p..=p) } else { 0.0 };
    let cam = CameraView::orbit(j, az, pitch, cfg.ring.radius, cfg.ring.focal, cfg.ring.resolution)?;
    let t = seed::rng(seed::derive(cfg.seed, seed::TIMESTEPS, &idx)).gen_range(cfg.t_min..=cfg.t_max);
    Ok((cam, t, seed::derive(cfg.seed, seed::RESAMPLE, &idx)))
}

/// SDS gradient of the flat parameters of `scene` for one view, with the
/// target's render as oracle mean.
fn view_sds(
    scene: &SceneParams,
    target: &SceneParams,
    cam: &CameraView,
    t: f64,
    noise_seed: u64,
    cfg: &RestoreConfig,
) -> Result<Vec<f64>> {
    let opts = RenderOptions { normals: false, ..cfg.render };
    let mean = cfg.latent.encode(&render(target, cam, &opts)?.image)?;
    let z = cfg.latent.encode(&render(scene, cam, &opts)?.image)?;
    let eps = seed::gaussian_field(z.width(), z.height(), z.channels(), noise_seed);
    let z_t = add_noise(&z, &eps, t, &cfg.schedule)?;
    let model = GaussianImageModel::new(mean, cfg.tau)?;
    let eps_pred = oracle_epsilon(&z_t, t, &model, &cfg.schedule)?;
    Ok(sds_gradient(scene, cam, &opts, &cfg.latent, &cfg.schedule, &eps, t, &eps_pred)?.values)
}

fn check_net(pairs: &[RestorePair], net: &TransformNet) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Contract("restoration needs at least one scene".into()));
    }
    for p in pairs {
        if p.base.features() != net.features() || p.base.grid_size() != p.target.grid_size() {
            return Err(Error::ShapeMismatch("restoration pair does not match the network".into()));
        }
    }
    Ok(())
}

/// Gradient of the summed per-view SDS objective with respect to the
/// network parameters, through [`apply_transform`], for a fixed set of
/// views; the base grids stay frozen.
pub fn pretrain_gradient(pairs: &[RestorePair], net: &TransformNet, cfg: &RestoreConfig, step: usize) -> Result<Vec<f64>> {
    check_net(pairs, net)?;
    let mut grad = vec![0.0; net.param_count()];
    let norm = 1.0 / (pairs.len() * cfg.views_per_step.max(1)) as f64;
    for (i, pair) in pairs.iter().enumerate() {
        let transformed = apply_transform(net, &pair.base)?;
        let mut grid_grad = vec![0.0; pair.base.grid_len()];
        for j in 0..cfg.views_per_step {
            let (cam, t, noise) = random_view(cfg, PRETRAIN, step, i, j)?;
            let g = view_sds(&transformed, &pair.target, &cam, t, noise, cfg)?;
            for (a, b) in grid_grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let net_grad = transform_backward(net, &pair.base, &grid_grad)?;
        for (a, b) in grad.iter_mut().zip(&net_grad) {
            *a += norm * b;
        }
    }
    Ok(grad)
}

/// Trains the grid transform on all pairs with randomly drawn views.
pub fn restore_pretrain(pairs: &[RestorePair], net: &TransformNet, cfg: &RestoreConfig) -> Result<TransformNet> {
    let mut net = net.clone();
    for s in 1..=cfg.pretrain_steps {
        let grad = pretrain_gradient(pairs, &net, cfg, s)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: s,
                view: None,
                detail: "pretraining gradient".into(),
            });
        }
        net.descend(&grad, cfg.step_size)?;
    }
    Ok(net)
}

/// Adapts a pretrained network and the scene decoder to one pair. Returns
/// the restored scene (transformed grid, tuned decoder) and the tuned
/// network. The base grid itself is never modified.
pub fn restore_finetune(
    pair: &RestorePair,
    net: &TransformNet,
    cfg: &RestoreConfig,
) -> Result<(SceneParams, TransformNet)> {
    check_net(std::slice::from_ref(pair), net)?;
    let mut net = net.clone();
    let mut base = pair.base.clone();
    let grid_len = base.grid_len();
    let norm = 1.0 / cfg.views_per_step.max(1) as f64;
    for s in 1..=cfg.finetune_steps {
        let transformed = apply_transform(&net, &base)?;
        let mut grad = vec![0.0; base.param_count()];
        for j in 0..cfg.views_per_step {
            let (cam, t, noise) = random_view(cfg, FINETUNE, s, 0, j)?;
            let g = view_sds(&transformed, &pair.target, &cam, t, noise, cfg)?;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += norm * b;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: s,
                view: None,
                detail: "fine-tuning gradient".into(),
            });
        }
        let net_grad = transform_backward(&net, &base, &grad[..grid_len])?;
        net.descend(&net_grad, cfg.finetune_step_size)?;
        // Only the decoder part of the scene moves.
        let mut decoder_only = grad;
        decoder_only[..grid_len].iter_mut().for_each(|g| *g = 0.0);
        base.descend(&decoder_only, cfg.finetune_step_size)?;
    }
    Ok((apply_transform(&net, &base)?, net))
}

/// Mean image loss of transformed bases against their targets over the
/// configured fixed ring of views.
pub fn restore_loss(pairs: &[RestorePair], net: &TransformNet, cfg: &RestoreConfig) -> Result<f64> {
    check_net(pairs, net)?;
    let (cams, _) = camera_ring(&cfg.ring)?;
    let opts = RenderOptions { normals: false, ..cfg.render };
    let mut total = 0.0;
    for pair in pairs {
        let transformed = apply_transform(net, &pair.base)?;
        for cam in &cams {
            total += image_loss(&render(&transformed, cam, &opts)?.image, &render(&pair.target, cam, &opts)?.image)?;
        }
    }
    Ok(total / (pairs.len() * cams.len()) as f64)
}
