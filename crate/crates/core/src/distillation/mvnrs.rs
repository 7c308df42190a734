use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    cosine, image_loss, image_loss_cotangent, reference_loss_grad, GradientKind, GradientRecord, RefineConfig,
};
use crate::conditioning::{build_condition, hybrid_epsilon, ConditionStack, HybridInputs, HybridPrior};
use crate::diffusion::{add_noise, oracle_epsilon, predict_x0, GaussianImageModel};
use crate::error::{Error, Result};
use crate::field::FieldStack;
use crate::geometry::{downsample_depth_min, warp_view, CameraView};
use crate::noise::{init_anchor_chain, resample, AnchorNoiseSet};
use crate::scene::{render, render_backward_multi, RenderOptions, RenderOutput, SceneParams};
use crate::seed;
use crate::views::{camera_ring, ViewChain};

/// What the refinement is distilled towards.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineTargets {
    /// Reference image, seen from the chain's root view.
    pub reference: FieldStack,
    /// Per-view oracle means at latent resolution, indexed by view.
    pub means: Vec<FieldStack>,
    /// Oracle standard deviation.
    pub tau: f64,
}

/// Everything one view step needs besides the scene and anchors.
pub struct ViewContext<'a> {
    pub view: usize,
    pub cam: &'a CameraView,
    /// Render of the current scene from `cam`.
    pub rendered: &'a RenderOutput,
    pub model: &'a GaussianImageModel,
    pub conditioning: Option<(&'a HybridPrior, HybridInputs<'a>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub score_d: f64,
    /// `None` while no target is retained.
    pub score_p: Option<f64>,
    /// Score of the gradient actually applied.
    pub score: f64,
    pub accepted: bool,
    pub loss_d: f64,
    pub loss_p: Option<f64>,
    /// MSE of the render against the decoded oracle mean.
    pub target_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewStepOutput {
    pub grad: GradientRecord,
    pub metrics: ViewMetrics,
}

/// One view of one iteration: resample around the anchor, denoise, score
/// the denoised-target gradient and the retained-target gradient against
/// the driving gradient, keep the better one.
pub fn mvnrs_view_step(
    scene: &SceneParams,
    ctx: &ViewContext,
    anchors: &mut AnchorNoiseSet,
    driven: &GradientRecord,
    t: f64,
    iteration: usize,
    cfg: &RefineConfig,
) -> Result<ViewStepOutput> {
    let v = ctx.view;
    if v >= anchors.len() {
        return Err(Error::Contract(format!("no anchor for view {v}")));
    }
    let image = &ctx.rendered.image;
    let state = anchors.view(v);
    let eps = if cfg.freeze_noise {
        state.anchor.clone()
    } else {
        resample(&state.anchor, cfg.sigma, seed::derive(cfg.seed, seed::RESAMPLE, &[iteration as u64, v as u64]))?
    };
    let z = cfg.latent.encode(image)?;
    let z_t = add_noise(&z, &eps, t, &cfg.schedule)?;
    let eps_hat = match &ctx.conditioning {
        Some((prior, inputs)) => hybrid_epsilon(&z_t, t, &cfg.schedule, ctx.model, prior, inputs)?,
        None => oracle_epsilon(&z_t, t, ctx.model, &cfg.schedule)?,
    };
    let denoised = predict_x0(&z_t, &eps_hat, t, &cfg.schedule, &cfg.latent)?;
    let loss_d = image_loss(image, &denoised)?;
    let cot_d = image_loss_cotangent(image, &denoised)?;
    let retained_target = state.target_image.as_ref().filter(|_| cfg.retention);
    let cot_p = retained_target.map(|p| image_loss_cotangent(image, p)).transpose()?;
    let loss_p = retained_target.map(|p| image_loss(image, p)).transpose()?;
    let cots: Vec<&FieldStack> = std::iter::once(&cot_d).chain(cot_p.as_ref()).collect();
    let (_, mut grads) = render_backward_multi(scene, ctx.cam, &cfg.render, &cots)?;
    if !cfg.optimize_decoder {
        grads.iter_mut().for_each(|g| g[scene.grid_len()..].iter_mut().for_each(|x| *x = 0.0));
    }
    let grad_p = if cot_p.is_some() { grads.pop() } else { None };
    let grad_d = grads.pop().expect("denoised gradient");
    for (g, what) in [(Some(&grad_d), "denoised-target"), (grad_p.as_ref(), "retained")] {
        if let Some(g) = g {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    iteration,
                    view: Some(v),
                    detail: format!("{what} gradient entry {i} is {}", g[i]),
                });
            }
        }
    }
    let score_d = cosine(&grad_d, &driven.values)?;
    let score_p = grad_p.as_ref().map(|g| cosine(g, &driven.values)).transpose()?;
    let target_loss = image_loss(image, &cfg.latent.decode(&ctx.model.mean))?;

    let state = anchors.view_mut(v);
    let (values, score, accepted) = if !cfg.retention {
        (grad_d, score_d, false)
    } else if score_d > score_p.unwrap_or(f64::NEG_INFINITY) {
        state.anchor = eps;
        state.target_image = Some(denoised);
        (grad_d, score_d, true)
    } else {
        (grad_p.expect("retained gradient when score_p is set"), score_p.expect("set"), false)
    };
    if cfg.retention {
        state.retained_score = Some(score);
        state.retained_grad = Some(values.clone());
    }
    let kind = if cfg.retention { GradientKind::Retained } else { GradientKind::DenoisedTarget };
    Ok(ViewStepOutput {
        grad: GradientRecord::new(values, Some(v), kind),
        metrics: ViewMetrics {
            view: v,
            score_d,
            score_p,
            score,
            accepted,
            loss_d,
            loss_p,
            target_loss,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub t: f64,
    pub step_size: f64,
    pub reference_loss: f64,
    pub grad_norm: f64,
    pub anchor_updates: usize,
    /// Mean applied-gradient score over views.
    pub mean_score: f64,
    pub views: Vec<ViewMetrics>,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub scene: SceneParams,
    pub anchors: AnchorNoiseSet,
    pub cameras: Vec<CameraView>,
    pub chain: ViewChain,
    /// Mean over iterations of [`IterationMetrics::mean_score`].
    pub mean_score: f64,
    pub anchor_updates: usize,
}

/// [`refine_with`] without conditioning or observer.
pub fn refine(scene: &SceneParams, targets: &RefineTargets, cfg: &RefineConfig) -> Result<RefineOutcome> {
    refine_with(scene, targets, cfg, None, |_, _| Ok(()))
}

/// Runs `cfg.steps` iterations of multi-view refinement. Every iteration
/// renders all views at the current parameters, walks the view chain (the
/// root is driven by the reference-loss gradient, every other view by its
/// driver's applied gradient), sums the applied gradients with the
/// reference gradient and takes one descent step. `observe` sees each
/// iteration's metrics and the updated scene.
pub fn refine_with(
    scene: &SceneParams,
    targets: &RefineTargets,
    cfg: &RefineConfig,
    prior: Option<&HybridPrior>,
    mut observe: impl FnMut(&IterationMetrics, &SceneParams) -> Result<()>,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    let (cams, chain) = camera_ring(&cfg.ring())?;
    if targets.means.len() != cams.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} oracle means for {} views",
            targets.means.len(),
            cams.len()
        )));
    }
    let models = targets
        .means
        .iter()
        .map(|m| GaussianImageModel::new(m.clone(), targets.tau))
        .collect::<Result<Vec<_>>>()?;
    let k = cfg.latent.factor();
    let latent_cams = cams.iter().map(|c| c.downscaled(k)).collect::<Result<Vec<_>>>()?;
    let root = chain.root();
    let prior = prior
        .map(|p| {
            let mut p = p.clone();
            p.w_ex = cfg.w_ex;
            p
        })
        .filter(|p| !p.is_transparent());
    let prior = prior.as_ref();
    let render_opts = RenderOptions {
        normals: prior.is_some(),
        ..cfg.render
    };

    let mut scene = scene.clone();
    let channels = targets.means[0].channels();
    let (lw, lh) = (latent_cams[0].width(), latent_cams[0].height());
    let mut anchors = if cfg.anchor_init {
        let depths = cams
            .iter()
            .map(|c| downsample_depth_min(&render(&scene, c, &render_opts)?.depth, k))
            .collect::<Result<Vec<_>>>()?;
        init_anchor_chain(&chain, &latent_cams, &depths, channels, cfg.seed)?
    } else {
        AnchorNoiseSet::independent(cams.len(), lw, lh, channels, cfg.seed)
    };

    let mut score_sum = 0.0;
    let mut updates_total = 0;
    for s in 1..=cfg.steps {
        let t = seed::rng(seed::derive(cfg.seed, seed::TIMESTEPS, &[s as u64])).gen_range(cfg.t_min..=cfg.t_max(s));
        let step = cfg.step_size.at(s, cfg.steps);
        let renders = cams
            .iter()
            .map(|c| render(&scene, c, &render_opts))
            .collect::<Result<Vec<_>>>()?;
        let (reference_loss, mut ref_grad) =
            reference_loss_grad(&scene, &targets.reference, &cams[root], &cfg.render)?;
        if !cfg.optimize_decoder {
            ref_grad.values[scene.grid_len()..].iter_mut().for_each(|x| *x = 0.0);
        }
        let conditions = match prior {
            Some(p) => Some(
                (0..cams.len())
                    .map(|v| view_condition(p, &targets.reference, &renders, &cams, &latent_cams, &chain, v, cfg))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };

        let mut applied: Vec<Option<GradientRecord>> = vec![None; cams.len()];
        let mut view_metrics = Vec::with_capacity(cams.len());
        for &v in chain.order() {
            let driven = match chain.driver(v) {
                None => &ref_grad,
                Some(d) => applied[d].as_ref().expect("drivers precede their views"),
            };
            let conditioning = match (&conditions, prior) {
                (Some(cs), Some(p)) => {
                    let c = &cs[v];
                    Some((
                        p,
                        HybridInputs {
                            cond: &c.cond,
                            driving_latent: &c.driving_latent,
                            driving_depth: &c.driving_depth,
                            src: &latent_cams[c.driver],
                            dst: &latent_cams[v],
                        },
                    ))
                }
                _ => None,
            };
            let ctx = ViewContext {
                view: v,
                cam: &cams[v],
                rendered: &renders[v],
                model: &models[v],
                conditioning,
            };
            let out = mvnrs_view_step(&scene, &ctx, &mut anchors, driven, t, s, cfg)?;
            view_metrics.push(out.metrics);
            applied[v] = Some(out.grad);
        }

        let mut total = GradientRecord::zeros(scene.param_count(), GradientKind::Retained);
        for g in applied.iter().flatten() {
            total.add_scaled(g, cfg.view_weight)?;
        }
        total.add_scaled(&ref_grad, cfg.reference_weight)?;
        if !total.is_finite() {
            return Err(Error::NonFinite {
                iteration: s,
                view: None,
                detail: "aggregated gradient".into(),
            });
        }
        scene.descend(&total.values, step)?;

        view_metrics.sort_by_key(|m| m.view);
        let anchor_updates = view_metrics.iter().filter(|m| m.accepted).count();
        let mean_score = view_metrics.iter().map(|m| m.score).sum::<f64>() / view_metrics.len() as f64;
        score_sum += mean_score;
        updates_total += anchor_updates;
        let metrics = IterationMetrics {
            iteration: s,
            t,
            step_size: step,
            reference_loss,
            grad_norm: total.norm(),
            anchor_updates,
            mean_score,
            views: view_metrics,
        };
        observe(&metrics, &scene)?;
    }
    Ok(RefineOutcome {
        scene,
        anchors,
        cameras: cams,
        chain,
        mean_score: score_sum / cfg.steps as f64,
        anchor_updates: updates_total,
    })
}

struct ViewCondition {
    cond: ConditionStack,
    driver: usize,
    driving_latent: FieldStack,
    driving_depth: FieldStack,
}

/// Projects the reference into view `v` through the current root-view
/// depth and stages the driver's latent and depth for the implicit branch.
#[allow(clippy::too_many_arguments)]
fn view_condition(
    prior: &HybridPrior,
    reference: &FieldStack,
    renders: &[RenderOutput],
    cams: &[CameraView],
    latent_cams: &[CameraView],
    chain: &ViewChain,
    v: usize,
    cfg: &RefineConfig,
) -> Result<ViewCondition> {
    let root = chain.root();
    let ref_depth = &renders[root].depth;
    let ref_warp = warp_view(reference, ref_depth, &cams[root], &cams[v])?;
    let mask_warp = warp_view(&renders[root].silhouette(), ref_depth, &cams[root], &cams[v])?;
    let cond = build_condition(&ref_warp, &mask_warp, &renders[v], &cfg.latent, &prior.geo_merge)?;
    let driver = chain.driver(v).unwrap_or(v);
    debug_assert_eq!(latent_cams.len(), cams.len());
    Ok(ViewCondition {
        cond,
        driver,
        driving_latent: cfg.latent.encode(&renders[driver].image)?,
        driving_depth: downsample_depth_min(&renders[driver].depth, cfg.latent.factor())?,
    })
}
