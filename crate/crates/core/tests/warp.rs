mod common;

use common::{parallel_camera, tagged_checkerboard};
use mvdistill_core::geometry::{lift_depth, splat, warp_view};
use mvdistill_core::scene::init_synthetic;
use mvdistill_core::{CameraView, ColoredPointCloud, FieldStack, RenderOptions, ShapeSpec};
use nalgebra::Vector3;

#[test]
fn identity_warp_is_exact() {
    let scene = init_synthetic(ShapeSpec::TexturedSphere, 3);
    let cam = CameraView::orbit(0, 40.0, 10.0, 3.0, 38.4, 32).unwrap();
    let out = mvdistill_core::scene::render(&scene, &cam, &RenderOptions::default()).unwrap();
    let w = warp_view(&out.image, &out.depth, &cam, &cam).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            let k = y * 32 + x;
            assert_eq!(w.void_mask[k], !out.depth.is_valid(x, y), "pixel {x},{y}");
            if !w.void_mask[k] {
                assert_eq!(w.warped.pixel(x, y), out.image.pixel(x, y));
            }
        }
    }

    let flat = FieldStack::filled(16, 16, 1, 2.5);
    let tags = tagged_checkerboard(16, 4);
    let cam = parallel_camera(0.0, 20.0, 16);
    let w = warp_view(&tags, &flat, &cam, &cam).unwrap();
    assert_eq!(w.void_count(), 0);
    assert_eq!(w.warped.data(), tags.data());
}

#[test]
fn checkerboard_disparity_follows_baseline_over_depth() {
    let (res, focal, depth) = (64, 60.0, 4.0);
    let tags = tagged_checkerboard(res, 8);
    let depth_map = FieldStack::filled(res, res, 1, depth);
    let src = parallel_camera(0.0, focal, res);
    for baseline in [0.1, 0.25, 0.4] {
        let dst = parallel_camera(baseline, focal, res);
        let w = warp_view(&tags, &depth_map, &src, &dst).unwrap();
        let disparity = focal * baseline / depth;
        let mut landed = 0;
        for y in 0..res {
            for x in 0..res {
                if w.void_mask[y * res + x] {
                    continue;
                }
                landed += 1;
                let (sx, sy) = (w.warped.get(x, y, 0), w.warped.get(x, y, 1));
                assert!((sx - disparity - x as f64).abs() <= 0.5, "b={baseline} at {x},{y}: src {sx}");
                assert_eq!(sy, y as f64);
                let checker = ((sx as usize / 8 + sy as usize / 8) % 2) as f64;
                assert_eq!(w.warped.get(x, y, 2), checker);
            }
        }
        let uncovered = disparity.ceil() as usize + 1;
        assert!(landed >= res * (res - uncovered), "landed {landed} for b={baseline}");
    }
}

#[test]
fn opposite_view_warp_is_void() {
    let scene = init_synthetic(ShapeSpec::Sphere, 0);
    for az in [0.0, 70.0, 200.0] {
        let front = CameraView::orbit(0, az, 0.0, 3.0, 38.4, 32).unwrap();
        let back = CameraView::orbit(1, az + 180.0, 0.0, 3.0, 38.4, 32).unwrap();
        let out = mvdistill_core::scene::render(&scene, &front, &RenderOptions::default()).unwrap();
        let w = warp_view(&out.image, &out.depth, &front, &back).unwrap();
        assert_eq!(w.void_count(), 32 * 32, "azimuth {az}");
        assert!(w.depth.data().iter().all(|d| d.is_infinite()));
    }
}

#[test]
fn integer_tags_are_conserved() {
    let scene = init_synthetic(ShapeSpec::TwoBlob, 1);
    let src = CameraView::orbit(0, 0.0, 0.0, 3.0, 38.4, 32).unwrap();
    let dst = CameraView::orbit(1, 30.0, 12.0, 3.0, 38.4, 32).unwrap();
    let out = mvdistill_core::scene::render(&scene, &src, &RenderOptions::default()).unwrap();
    let tags = FieldStack::from_fn(32, 32, 1, |x, y, _| (y * 32 + x) as f64);
    let w = warp_view(&tags, &out.depth, &src, &dst).unwrap();
    let mut seen = std::collections::HashSet::new();
    for (k, &void) in w.void_mask.iter().enumerate() {
        if void {
            continue;
        }
        let tag = w.warped.data()[k];
        assert_eq!(tag.fract(), 0.0);
        let (sx, sy) = (tag as usize % 32, tag as usize / 32);
        assert!(out.depth.is_valid(sx, sy), "tag from an invalid source pixel");
        assert!(seen.insert(tag as usize), "tag {tag} landed twice");
    }
    assert!(!seen.is_empty());
}

#[test]
fn nearest_point_wins_and_ties_go_to_lowest_source() {
    let cam = parallel_camera(0.0, 10.0, 8);
    let on_axis = |z: f64| Vector3::new(0.5 / 10.0 * z, 0.5 / 10.0 * z, z);
    let cloud = ColoredPointCloud::new(
        vec![on_axis(3.0), on_axis(2.0), on_axis(2.0)],
        vec![1.0, 2.0, 3.0],
        1,
        vec![[0, 0], [5, 1], [4, 1]],
        Vector3::zeros(),
    )
    .unwrap();
    let w = splat(&cloud, &cam);
    assert_eq!(w.void_count(), 63);
    assert_eq!(w.warped.get(4, 4, 0), 3.0);
    assert!((w.depth.get(4, 4, 0) - 2.0).abs() < 1e-12);
}

#[test]
fn lift_skips_non_positive_depth() {
    let cam = parallel_camera(0.0, 10.0, 4);
    let img = FieldStack::filled(4, 4, 2, 1.0);
    let depth = FieldStack::from_fn(4, 4, 1, |x, _, _| if x == 0 { 0.0 } else { 1.0 });
    let cloud = lift_depth(&img, &depth, &cam).unwrap();
    assert_eq!(cloud.len(), 12);
    assert_eq!(cloud.skipped(), 4);
    assert!(lift_depth(&FieldStack::zeros(3, 4, 2), &depth, &cam).is_err());
}
