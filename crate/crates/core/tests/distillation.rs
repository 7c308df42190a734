mod common;

use common::{small_refine_config, small_sphere, targets_from};
use mvdistill_core::distillation::{
    mvnrs_view_step, pretrain_gradient, refine, refine_with, restore_finetune, restore_loss, restore_pretrain, GradientKind,
    GradientRecord, RestoreConfig, RestorePair, ViewContext,
};
use mvdistill_core::noise::AnchorNoiseSet;
use mvdistill_core::scene::render;
use mvdistill_core::{CameraView, GaussianImageModel, TransformNet};

#[test]
fn retained_score_is_the_better_of_both_candidates() {
    let cfg = small_refine_config(60, 3);
    let targets = targets_from(&small_sphere(1), &cfg, 0.1);
    let mut updates = 0;
    let mut rejected = 0;
    refine_with(&small_sphere(2), &targets, &cfg, None, |m, _| {
        for v in &m.views {
            let best = v.score_d.max(v.score_p.unwrap_or(f64::NEG_INFINITY));
            assert_eq!(v.score, best, "iteration {} view {}", m.iteration, v.view);
            assert_eq!(v.accepted, v.score_p.is_none_or(|p| v.score_d > p));
            if m.iteration == 1 {
                assert!(v.score_p.is_none() && v.accepted);
            }
            rejected += usize::from(!v.accepted);
        }
        updates += m.anchor_updates;
        Ok(())
    })
    .unwrap();
    assert!(updates > 0 && rejected > 0, "updates {updates}, rejected {rejected}");
}

#[test]
fn matched_scene_is_a_fixed_point() {
    let mut cfg = small_refine_config(20, 0);
    cfg.sigma = 0.0;
    let scene = small_sphere(4);
    let targets = targets_from(&scene, &cfg, 0.0);
    let out = refine_with(&scene, &targets, &cfg, None, |m, _| {
        assert!(m.grad_norm < 1e-8, "iteration {}: {}", m.iteration, m.grad_norm);
        assert!(m.reference_loss < 1e-20);
        Ok(())
    })
    .unwrap();
    let drift = out.scene.to_flat().iter().zip(scene.to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-8, "drift {drift}");
}

#[test]
fn refinement_approaches_the_target() {
    let cfg = small_refine_config(80, 1);
    let target = small_sphere(1);
    let targets = targets_from(&target, &cfg, 0.1);
    let start = small_sphere(9);
    let err = |s| {
        let (cams, _) = mvdistill_core::views::camera_ring(&cfg.ring()).unwrap();
        cams.iter()
            .map(|c| {
                let a = render(s, c, &cfg.render).unwrap().image;
                let b = render(&target, c, &cfg.render).unwrap().image;
                a.sub(&b).unwrap().norm_sq()
            })
            .sum::<f64>()
    };
    let out = refine(&start, &targets, &cfg).unwrap();
    assert!(err(&out.scene) < 0.5 * err(&start), "{} -> {}", err(&start), err(&out.scene));
}

#[test]
fn refinement_is_deterministic() {
    let cfg = small_refine_config(10, 5);
    let targets = targets_from(&small_sphere(1), &cfg, 0.1);
    let run = || {
        let mut log = Vec::new();
        let out = refine_with(&small_sphere(2), &targets, &cfg, None, |m, _| {
            log.push(m.clone());
            Ok(())
        })
        .unwrap();
        (out.scene, log)
    };
    assert_eq!(run(), run());
}

#[test]
fn view_step_rejects_a_worse_candidate_and_keeps_the_anchor() {
    let cfg = small_refine_config(1, 0);
    let scene = small_sphere(2);
    let cam = CameraView::orbit(0, 0.0, 0.0, 3.0, 19.2, 16).unwrap();
    let rendered = render(&scene, &cam, &cfg.render).unwrap();
    let target = render(&small_sphere(1), &cam, &cfg.render).unwrap().image;
    let model = GaussianImageModel::new(target, 0.1).unwrap();
    let ctx = ViewContext { view: 0, cam: &cam, rendered: &rendered, model: &model, conditioning: None };
    let mut anchors = AnchorNoiseSet::independent(1, 16, 16, 3, 0);
    let zero = GradientRecord::zeros(scene.param_count(), GradientKind::Reference);

    let first = mvnrs_view_step(&scene, &ctx, &mut anchors, &zero, 0.5, 1, &cfg).unwrap();
    assert!(first.metrics.accepted);
    assert_eq!(first.metrics.score_d, 0.0);
    let kept = anchors.view(0).clone();
    // Driven by its own gradient, the retained candidate scores 1.
    let second = mvnrs_view_step(&scene, &ctx, &mut anchors, &first.grad, 0.5, 2, &cfg).unwrap();
    assert!(second.metrics.score_p.unwrap() > 1.0 - 1e-12);
    assert!(!second.metrics.accepted);
    assert_eq!(anchors.view(0).anchor, kept.anchor);
    assert_eq!(anchors.view(0).target_image, kept.target_image);
    assert_eq!(second.grad.values, first.grad.values);

    assert!(mvnrs_view_step(&scene, &ViewContext { view: 3, ..ctx }, &mut anchors, &zero, 0.5, 3, &cfg).is_err());
}

fn restore_pairs() -> Vec<RestorePair> {
    (0..2)
        .map(|k| {
            let target = small_sphere(k);
            let mut base = target.clone();
            base.smooth_density(2);
            RestorePair { base, target }
        })
        .collect()
}

fn small_restore_config() -> RestoreConfig {
    let mut cfg = RestoreConfig { pretrain_steps: 30, finetune_steps: 10, ..RestoreConfig::default() };
    cfg.ring.resolution = 12;
    cfg.ring.focal = 14.4;
    cfg.render.samples = 16;
    cfg
}

#[test]
fn zero_finetune_steps_return_the_transformed_base() {
    let pairs = restore_pairs();
    let cfg = RestoreConfig { finetune_steps: 0, ..small_restore_config() };
    let net = TransformNet::new(4, 6, 1);
    let (scene, net2) = restore_finetune(&pairs[0], &net, &cfg).unwrap();
    assert_eq!(net2, net);
    assert_eq!(scene, mvdistill_core::scene::apply_transform(&net, &pairs[0].base).unwrap());
}

#[test]
fn finetune_leaves_the_base_grid_untouched() {
    let pairs = restore_pairs();
    let snapshot = pairs[0].base.grid().to_vec();
    let cfg = small_restore_config();
    let (_, net) = restore_finetune(&pairs[0], &TransformNet::new(4, 6, 1), &cfg).unwrap();
    assert_eq!(pairs[0].base.grid(), &snapshot[..]);
    assert_ne!(net, TransformNet::new(4, 6, 1));
}

#[test]
fn pretraining_reduces_restoration_loss() {
    let pairs = restore_pairs();
    let cfg = small_restore_config();
    let net = TransformNet::new(4, 6, 1);
    let before = restore_loss(&pairs, &net, &cfg).unwrap();
    let trained = restore_pretrain(&pairs, &net, &cfg).unwrap();
    let after = restore_loss(&pairs, &trained, &cfg).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn matched_pairs_keep_the_network_at_identity() {
    let target = small_sphere(3);
    let pairs = vec![RestorePair { base: target.clone(), target }];
    let net = TransformNet::new(4, 6, 2);
    let cfg = small_restore_config();
    let g = pretrain_gradient(&pairs, &net, &cfg, 1).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-12));
    let trained = restore_pretrain(&pairs, &net, &cfg).unwrap();
    let drift = trained.to_flat().iter().zip(net.to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(drift < 1e-12, "drift {drift}");
}

#[test]
fn pretraining_loss_is_non_increasing_over_a_hundred_steps() {
    let pairs = restore_pairs();
    let cfg = RestoreConfig { pretrain_steps: 1, ..small_restore_config() };
    let mut net = TransformNet::new(4, 6, 1);
    let mut prev = restore_loss(&pairs, &net, &cfg).unwrap();
    let first = prev;
    for s in 1..=100 {
        let g = pretrain_gradient(&pairs, &net, &cfg, s).unwrap();
        net.descend(&g, cfg.step_size).unwrap();
        let loss = restore_loss(&pairs, &net, &cfg).unwrap();
        assert!(loss <= prev * (1.0 + 1e-9), "step {s}: {prev} -> {loss}");
        prev = loss;
    }
    assert!(prev < first);
}
