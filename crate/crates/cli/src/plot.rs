//! Minimal raster line plot of score trajectories.

use image::{Rgb, RgbImage};
use mvdistill_core::distillation::IterationMetrics;

const W: u32 = 640;
const H: u32 = 320;
const MARGIN: u32 = 24;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Per-view applied scores (grey) and their mean (black) over iterations,
/// on a fixed [-1, 1] vertical axis; the blue line marks 0.
pub fn score_plot(metrics: &[IterationMetrics]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let n = metrics.len().max(2);
    let px = |i: usize| MARGIN as i64 + (i as f64 / (n - 1) as f64 * (W - 2 * MARGIN) as f64).round() as i64;
    let py = |s: f64| {
        let s = if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 };
        (MARGIN as f64 + (1.0 - s) / 2.0 * (H - 2 * MARGIN) as f64).round() as i64
    };
    let (l, r) = (MARGIN as i64, (W - MARGIN) as i64);
    line(&mut img, (l, py(0.0)), (r, py(0.0)), Rgb([120, 150, 230]));
    line(&mut img, (l, py(1.0)), (l, py(-1.0)), Rgb([0, 0, 0]));
    let views = metrics.first().map_or(0, |m| m.views.len());
    for v in 0..views {
        for (i, w) in metrics.windows(2).enumerate() {
            let (a, b) = (&w[0].views, &w[1].views);
            if let (Some(a), Some(b)) = (a.get(v), b.get(v)) {
                line(&mut img, (px(i), py(a.score)), (px(i + 1), py(b.score)), Rgb([200, 200, 200]));
            }
        }
    }
    for (i, w) in metrics.windows(2).enumerate() {
        line(&mut img, (px(i), py(w[0].mean_score)), (px(i + 1), py(w[1].mean_score)), Rgb([0, 0, 0]));
    }
    img
}
