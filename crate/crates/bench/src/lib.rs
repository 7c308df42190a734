//! Shared inputs for the criterion benches.

use mvdistill_core::scene::{init_synthetic_with, ShapeSpec, SynthOptions};
use mvdistill_core::{CameraView, SceneParams};

/// Textured sphere on a `grid`^3 lattice and a frontal camera at `res`.
pub fn fixture(grid: usize, res: usize) -> (SceneParams, CameraView) {
    let opts = SynthOptions {
        grid_size: grid,
        ..SynthOptions::default()
    };
    let scene = init_synthetic_with(ShapeSpec::TexturedSphere, 7, &opts).expect("valid synth options");
    let cam = CameraView::orbit(0, 20.0, 10.0, 3.0, 1.2 * res as f64, res).expect("valid camera");
    (scene, cam)
}
