#![allow(dead_code)]

use mvdistill_core::scene::DECODED;
use mvdistill_core::{seed, CameraView, FieldStack, SceneParams};
use rand::Rng;

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|)`, zero when both are below `floor`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < floor {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Small scene with random density and colour logits and a random decoder.
pub fn random_scene(grid: usize, seed_value: u64) -> SceneParams {
    let mut rng = seed::rng(seed_value);
    let mut s = SceneParams::uniform(grid, 4, 1.0, &[0.0; 4]).unwrap();
    for v in s.grid_mut() {
        *v = rng.gen_range(-2.0..2.5);
    }
    let w: Vec<f64> = (0..DECODED * 4)
        .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 } + rng.gen_range(-0.2..0.2))
        .collect();
    let b = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    s.set_decoder(&w, b).unwrap();
    s
}

pub fn random_camera(res: usize, seed_value: u64) -> CameraView {
    let mut rng = seed::rng(seed_value);
    let az = rng.gen_range(0.0..360.0);
    let pitch = rng.gen_range(-30.0..30.0);
    CameraView::orbit(0, az, pitch, 3.0, 1.6 * res as f64, res).unwrap()
}

pub fn random_field(w: usize, h: usize, c: usize, seed_value: u64) -> FieldStack {
    seed::gaussian_field(w, h, c, seed_value)
}

/// Unit-norm random direction.
pub fn random_direction(n: usize, seed_value: u64) -> Vec<f64> {
    let f = seed::gaussian_field(n, 1, 1, seed_value);
    let norm = f.norm_sq().sqrt();
    f.data().iter().map(|v| v / norm).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scene with `p + eps * d` in flat layout.
pub fn shifted(scene: &SceneParams, d: &[f64], eps: f64) -> SceneParams {
    let mut s = scene.clone();
    let flat: Vec<f64> = scene.to_flat().iter().zip(d).map(|(p, v)| p + eps * v).collect();
    s.set_flat(&flat).unwrap();
    s
}

/// Camera at the origin looking down +z, shifted by `baseline` along x.
pub fn parallel_camera(baseline: f64, focal: f64, res: usize) -> CameraView {
    let c = (res as f64 - 1.0) / 2.0;
    CameraView::new(
        0,
        nalgebra::Matrix3::identity(),
        nalgebra::Vector3::new(-baseline, 0.0, 0.0),
        focal,
        [c, c],
        res,
        res,
    )
    .unwrap()
}

/// Three-channel field tagging each pixel with `(x, y, checker)`.
pub fn tagged_checkerboard(res: usize, square: usize) -> FieldStack {
    FieldStack::from_fn(res, res, 3, |x, y, c| match c {
        0 => x as f64,
        1 => y as f64,
        _ => ((x / square + y / square) % 2) as f64,
    })
}

/// Two-view conditioning sample on a textured sphere: the reference is the
/// render of `src`, the target view is 35 degrees away.
pub fn hybrid_sample(
    prior: &mvdistill_core::conditioning::HybridPrior,
    res: usize,
    t: f64,
    tau: f64,
    seed_value: u64,
) -> mvdistill_core::conditioning::HybridSample {
    use mvdistill_core::conditioning::{build_condition, HybridSample};
    use mvdistill_core::geometry::warp_view;
    use mvdistill_core::scene::{init_synthetic, render};
    use mvdistill_core::{GaussianImageModel, LatentMap, RenderOptions, ShapeSpec};

    let scene = init_synthetic(ShapeSpec::TexturedSphere, seed_value);
    let focal = 1.2 * res as f64;
    let src = CameraView::orbit(0, 0.0, 0.0, 3.0, focal, res).unwrap();
    let dst = CameraView::orbit(1, 35.0, 8.0, 3.0, focal, res).unwrap();
    let opts = RenderOptions { samples: 32, normals: true };
    let (rs, rd) = (render(&scene, &src, &opts).unwrap(), render(&scene, &dst, &opts).unwrap());
    let ref_warp = warp_view(&rs.image, &rs.depth, &src, &dst).unwrap();
    let mask_warp = warp_view(&rs.silhouette(), &rs.depth, &src, &dst).unwrap();
    let cond = build_condition(&ref_warp, &mask_warp, &rd, &LatentMap::Identity, &prior.geo_merge).unwrap();
    let other = init_synthetic(ShapeSpec::TexturedSphere, seed_value + 1000);
    let mean = render(&other, &dst, &opts).unwrap().image;
    HybridSample {
        cond,
        driving_latent: rs.image.clone(),
        driving_depth: rs.depth.clone(),
        src,
        dst,
        z_t: random_field(res, res, 3, seed_value + 1),
        t,
        model: GaussianImageModel::new(mean, tau).unwrap(),
    }
}

/// Oracle means and reference rendered from `target` on the config's ring.
pub fn targets_from(
    target: &SceneParams,
    cfg: &mvdistill_core::distillation::RefineConfig,
    tau: f64,
) -> mvdistill_core::distillation::RefineTargets {
    use mvdistill_core::scene::render;
    let (cams, chain) = mvdistill_core::views::camera_ring(&cfg.ring()).unwrap();
    let renders: Vec<_> = cams.iter().map(|c| render(target, c, &cfg.render).unwrap().image).collect();
    mvdistill_core::distillation::RefineTargets {
        reference: renders[chain.root()].clone(),
        means: renders.iter().map(|r| cfg.latent.encode(r).unwrap()).collect(),
        tau,
    }
}

/// Small, fast refinement configuration.
pub fn small_refine_config(steps: usize, seed_value: u64) -> mvdistill_core::distillation::RefineConfig {
    use mvdistill_core::distillation::{RefineConfig, StepSchedule};
    RefineConfig {
        views: 4,
        resolution: 16,
        focal: 19.2,
        render: mvdistill_core::RenderOptions { samples: 16, normals: false },
        steps,
        step_size: StepSchedule::Constant { value: 500.0 },
        seed: seed_value,
        ..RefineConfig::default()
    }
}

pub fn small_sphere(texture_seed: u64) -> SceneParams {
    use mvdistill_core::scene::{init_synthetic_with, SynthOptions};
    let opts = SynthOptions { grid_size: 10, ..SynthOptions::default() };
    init_synthetic_with(mvdistill_core::ShapeSpec::TexturedSphere, texture_seed, &opts).unwrap()
}
