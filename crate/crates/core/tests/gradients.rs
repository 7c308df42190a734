mod common;

use common::*;
use mvdistill_core::distillation::{reference_loss_grad, sds_gradient};
use mvdistill_core::scene::{apply_transform, render, render_backward, transform_backward};
use mvdistill_core::{GaussianImageModel, LatentMap, NoiseSchedule, RenderOptions, SceneParams, TransformNet};
use mvdistill_core::diffusion::{add_noise, oracle_epsilon};

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-9;

fn opts() -> RenderOptions {
    RenderOptions {
        samples: 12,
        normals: false,
    }
}

#[test]
fn render_backward_matches_finite_differences() {
    for k in 0..6 {
        let scene = random_scene(5, k);
        let cam = random_camera(8, 100 + k);
        let cot = random_field(8, 8, 3, 200 + k);
        let grad = render_backward(&scene, &cam, &opts(), &cot).unwrap();
        let f = |s: &SceneParams| render(s, &cam, &opts()).unwrap().image.dot(&cot).unwrap();
        let d = random_direction(scene.param_count(), 300 + k);
        let num = central_diff(|e| f(&shifted(&scene, &d, e)), H);
        let err = rel_err(dot(&grad, &d), num, FLOOR);
        assert!(err < TOL, "instance {k}: directional rel err {err}");
        // A few single coordinates, including the decoder.
        let n = scene.param_count();
        for i in [k as usize * 7 % scene.grid_len(), n - 1, n - 6] {
            let mut e_i = vec![0.0; n];
            e_i[i] = 1.0;
            let num = central_diff(|e| f(&shifted(&scene, &e_i, e)), H);
            let err = rel_err(grad[i], num, FLOOR);
            assert!(err < TOL, "instance {k}, param {i}: {} vs {num}", grad[i]);
        }
    }
}

#[test]
fn transform_backward_matches_finite_differences() {
    for k in 0..4 {
        let base = random_scene(4, 10 + k);
        let mut net = TransformNet::new(4, 3, k);
        // Leave the identity initialisation so both layers carry gradient.
        let w: Vec<f64> = random_direction(net.param_count(), 20 + k).iter().map(|v| v * 3.0).collect();
        net.set_flat(&w).unwrap();
        let cot = random_direction(base.grid_len(), 30 + k);
        let f = |n: &TransformNet| dot(apply_transform(n, &base).unwrap().grid(), &cot);
        let grad = transform_backward(&net, &base, &cot).unwrap();
        let d = random_direction(net.param_count(), 40 + k);
        let num = central_diff(
            |e| {
                let mut n = net.clone();
                n.set_flat(&w.iter().zip(&d).map(|(a, b)| a + e * b).collect::<Vec<_>>()).unwrap();
                f(&n)
            },
            H,
        );
        let err = rel_err(dot(&grad, &d), num, FLOOR);
        assert!(err < TOL, "instance {k}: rel err {err}");
    }
}

#[test]
fn reference_loss_grad_matches_finite_differences() {
    for k in 0..5 {
        let scene = random_scene(5, 50 + k);
        let cam = random_camera(8, 60 + k);
        let reference = random_field(8, 8, 3, 70 + k).map(|v| 0.5 + 0.2 * v);
        let (loss, grad) = reference_loss_grad(&scene, &reference, &cam, &opts()).unwrap();
        assert!(loss > 0.0);
        let d = random_direction(scene.param_count(), 80 + k);
        let num = central_diff(
            |e| reference_loss_grad(&shifted(&scene, &d, e), &reference, &cam, &opts()).unwrap().0,
            H,
        );
        let err = rel_err(dot(&grad.values, &d), num, FLOOR);
        assert!(err < TOL, "instance {k}: rel err {err}");
    }
}

#[test]
fn reference_loss_vanishes_on_own_render() {
    let scene = random_scene(5, 1);
    let cam = random_camera(8, 2);
    let img = render(&scene, &cam, &opts()).unwrap().image;
    let (loss, grad) = reference_loss_grad(&scene, &img, &cam, &opts()).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grad.values.iter().all(|&g| g == 0.0));
    assert!(reference_loss_grad(&scene, &random_field(9, 8, 3, 0), &cam, &opts()).is_err());
}

/// With a zero-variance oracle the SDS gradient is the gradient of
/// `c/2 |render - mu|^2` with `c = w_t sqrt(a) / sqrt(1 - a)`.
#[test]
fn sds_gradient_is_a_scaled_squared_error_gradient() {
    let sched = NoiseSchedule::default();
    for k in 0..3 {
        let scene = random_scene(5, 90 + k);
        let cam = random_camera(8, 91 + k);
        let mu = random_field(8, 8, 3, 92 + k).map(|v| 0.5 + 0.1 * v);
        let t = 0.2 + 0.25 * k as f64;
        let a = sched.alpha(t);
        let c = sched.weight(t) * a.sqrt() / (1.0 - a).sqrt();
        let model = GaussianImageModel::new(mu.clone(), 0.0).unwrap();
        let eps = random_field(8, 8, 3, 93 + k);
        let grad_at = |s: &SceneParams| {
            let z = render(s, &cam, &opts()).unwrap().image;
            let zt = add_noise(&z, &eps, t, &sched).unwrap();
            let pred = oracle_epsilon(&zt, t, &model, &sched).unwrap();
            sds_gradient(s, &cam, &opts(), &LatentMap::Identity, &sched, &eps, t, &pred).unwrap()
        };
        let grad = grad_at(&scene);
        let loss = |s: &SceneParams| 0.5 * c * render(s, &cam, &opts()).unwrap().image.sub(&mu).unwrap().norm_sq();
        let d = random_direction(scene.param_count(), 94 + k);
        let num = central_diff(|e| loss(&shifted(&scene, &d, e)), H);
        let err = rel_err(dot(&grad.values, &d), num, FLOOR);
        assert!(err < TOL, "instance {k}: rel err {err}");
    }
}

#[test]
fn sds_gradient_vanishes_for_exact_prediction_and_outside_the_frustum() {
    let sched = NoiseSchedule::default();
    let scene = random_scene(5, 3);
    let cam = random_camera(8, 4);
    let eps = random_field(8, 8, 3, 5);
    let g = sds_gradient(&scene, &cam, &opts(), &LatentMap::Identity, &sched, &eps, 0.4, &eps).unwrap();
    assert!(g.values.iter().all(|&v| v == 0.0));

    // Camera looking away from the scene cube: no ray touches it.
    let away = mvdistill_core::CameraView::look_at(
        0,
        nalgebra::Vector3::new(0.0, 0.0, 5.0),
        nalgebra::Vector3::new(0.0, 0.0, 10.0),
        nalgebra::Vector3::new(0.0, 1.0, 0.0),
        10.0,
        8,
        8,
    )
    .unwrap();
    let pred = random_field(8, 8, 3, 6);
    let g = sds_gradient(&scene, &away, &opts(), &LatentMap::Identity, &sched, &eps, 0.4, &pred).unwrap();
    assert!(g.values.iter().all(|&v| v == 0.0));
}
