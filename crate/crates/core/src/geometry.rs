//! Pinhole cameras, depth lifting and z-buffered point splatting.
//!
//! Camera frame convention: x right, y down, z forward. A world point `p`
//! maps to camera coordinates `R p + t`, and to pixel coordinates
//! `(f x / z + cx, f y / z + cy)`. Pixel `(i, j)` has its centre at `(i, j)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{shape_err, Error, Result};
use crate::field::FieldStack;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub index: usize,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    focal: f64,
    principal: [f64; 2],
    width: usize,
    height: usize,
}

impl CameraView {
    pub fn new(
        index: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        focal: f64,
        principal: [f64; 2],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if orth > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(
                "camera rotation must be orthonormal with determinant +1".into(),
            ));
        }
        if !(focal > 0.0) || width == 0 || height == 0 {
            return Err(Error::Contract(format!(
                "camera needs focal > 0 and a non-empty image (f={focal}, {width}x{height})"
            )));
        }
        Ok(Self {
            index,
            rotation,
            translation,
            focal,
            principal,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`, with world `up` mapping to image up.
    /// The principal point is the image centre.
    pub fn look_at(
        index: usize,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Contract("look_at: eye == target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Contract("look_at: up parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let principal = [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0];
        Self::new(index, rotation, translation, focal, principal, width, height)
    }

    /// Camera on a sphere of `radius` around the origin, looking at the
    /// origin. Azimuth 0 is the frontal view on +z; positive pitch raises
    /// the camera towards +y.
    pub fn orbit(
        index: usize,
        azimuth_deg: f64,
        pitch_deg: f64,
        radius: f64,
        focal: f64,
        resolution: usize,
    ) -> Result<Self> {
        let (a, p) = (azimuth_deg.to_radians(), pitch_deg.to_radians());
        let eye = radius * Vector3::new(p.cos() * a.sin(), p.sin(), p.cos() * a.cos());
        Self::look_at(
            index,
            eye,
            Vector3::zeros(),
            Vector3::y(),
            focal,
            resolution,
            resolution,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn principal_point(&self) -> [f64; 2] {
        self.principal
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera-frame point at z-depth `depth` behind pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let [cx, cy] = self.principal;
        Vector3::new(
            (u - cx) * depth / self.focal,
            (v - cy) * depth / self.focal,
            depth,
        )
    }

    /// Pixel coordinates and z-depth of a world point, or `None` when the
    /// point is not strictly in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let [cx, cy] = self.principal;
        Some((self.focal * c.x / c.z + cx, self.focal * c.y / c.z + cy, c.z))
    }

    /// World-space ray through pixel `(u, v)`: origin at the camera centre,
    /// direction scaled so the ray parameter equals camera z-depth.
    pub fn ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let dir_cam = self.back_project(u, v, 1.0);
        (self.center(), self.rotation.transpose() * dir_cam)
    }

    /// Same pose at `1/factor` resolution, keeping pixel centres aligned.
    pub fn downscaled(&self, factor: usize) -> Result<CameraView> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Contract(format!(
                "downscale factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let k = factor as f64;
        let [cx, cy] = self.principal;
        CameraView::new(
            self.index,
            self.rotation,
            self.translation,
            self.focal / k,
            [(cx + 0.5) / k - 0.5, (cy + 0.5) / k - 0.5],
            self.width / factor,
            self.height / factor,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColoredPointCloud {
    positions: Vec<Vector3<f64>>,
    payload: Vec<f64>,
    channels: usize,
    source_pixel: Vec<[u32; 2]>,
    /// Centre of the camera the points were lifted from; the splatter uses
    /// it to drop points whose surface faces away from the target camera.
    source_center: Vector3<f64>,
    skipped: usize,
}

impl ColoredPointCloud {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        payload: Vec<f64>,
        channels: usize,
        source_pixel: Vec<[u32; 2]>,
        source_center: Vector3<f64>,
    ) -> Result<Self> {
        let n = positions.len();
        if payload.len() != n * channels || source_pixel.len() != n {
            return shape_err(format!(
                "point cloud with {n} points, {} payload values ({channels} ch), {} source pixels",
                payload.len(),
                source_pixel.len()
            ));
        }
        Ok(Self {
            positions,
            payload,
            channels,
            source_pixel,
            source_center,
            skipped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn payload(&self, i: usize) -> &[f64] {
        &self.payload[i * self.channels..(i + 1) * self.channels]
    }

    pub fn source_pixels(&self) -> &[[u32; 2]] {
        &self.source_pixel
    }

    /// Valid pixels that were skipped because of non-positive or non-finite depth.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    /// Splatted payload; its validity mask is the complement of `void_mask`.
    pub warped: FieldStack,
    /// True where no point landed.
    pub void_mask: Vec<bool>,
    /// Depth of the winning point, `+inf` on void pixels.
    pub depth: FieldStack,
}

impl WarpResult {
    pub fn void_count(&self) -> usize {
        self.void_mask.iter().filter(|&&v| v).count()
    }
}

/// Lifts every valid pixel of `image` to a world-space point using `depth`
/// (camera z-depth). Pixels are valid when both fields' masks allow them;
/// valid pixels with non-positive or non-finite depth are skipped and
/// counted in [`ColoredPointCloud::skipped`].
pub fn lift_depth(image: &FieldStack, depth: &FieldStack, cam: &CameraView) -> Result<ColoredPointCloud> {
    if !image.same_extent(depth) || depth.channels() != 1 {
        return shape_err(format!(
            "lift_depth: image {}x{} vs depth {}x{}x{}",
            image.width(),
            image.height(),
            depth.width(),
            depth.height(),
            depth.channels()
        ));
    }
    if image.width() != cam.width() || image.height() != cam.height() {
        return shape_err(format!(
            "lift_depth: image {}x{} vs camera {}x{}",
            image.width(),
            image.height(),
            cam.width(),
            cam.height()
        ));
    }
    let c = image.channels();
    let mut positions = Vec::new();
    let mut payload = Vec::new();
    let mut source = Vec::new();
    let mut skipped = 0;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !image.is_valid(x, y) || !depth.is_valid(x, y) {
                continue;
            }
            let d = depth.get(x, y, 0);
            if !(d > 0.0) || !d.is_finite() {
                skipped += 1;
                continue;
            }
            let p_cam = cam.back_project(x as f64, y as f64, d);
            positions.push(cam.camera_to_world(&p_cam));
            payload.extend_from_slice(image.pixel(x, y));
            source.push([x as u32, y as u32]);
        }
    }
    let mut cloud = ColoredPointCloud::new(positions, payload, c, source, cam.center())?;
    cloud.skipped = skipped;
    Ok(cloud)
}

/// Splats a point cloud into `cam` with a nearest-pixel z-buffer: every
/// point lands on its rounded pixel, the smallest camera depth wins, ties
/// go to the lowest row-major source pixel, and nothing is blended.
///
/// Points behind the camera are discarded, as are points whose surface
/// faces away from the target: when the directions from the point to the
/// source and target centres make an angle of 90° or more.
pub fn splat(cloud: &ColoredPointCloud, cam: &CameraView) -> WarpResult {
    splat_with_fill(cloud, cam, 0.0)
}

pub fn splat_with_fill(cloud: &ColoredPointCloud, cam: &CameraView, fill: f64) -> WarpResult {
    let (w, h, ch) = (cam.width(), cam.height(), cloud.channels());
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut winner: Vec<Option<usize>> = vec![None; w * h];
    let dst_center = cam.center();
    let order = |i: usize| {
        let [x, y] = cloud.source_pixel[i];
        (y, x)
    };
    for (i, p) in cloud.positions.iter().enumerate() {
        if (cloud.source_center - p).dot(&(dst_center - p)) <= 0.0 {
            continue;
        }
        let Some((u, v, z)) = cam.project(p) else {
            continue;
        };
        let (px, py) = (u.round(), v.round());
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            continue;
        }
        let k = py as usize * w + px as usize;
        let better = match winner[k] {
            None => true,
            Some(j) => z < zbuf[k] || (z == zbuf[k] && order(i) < order(j)),
        };
        if better {
            zbuf[k] = z;
            winner[k] = Some(i);
        }
    }
    let mut data = vec![fill; w * h * ch];
    let mut void_mask = vec![true; w * h];
    for (k, win) in winner.iter().enumerate() {
        if let Some(i) = *win {
            data[k * ch..(k + 1) * ch].copy_from_slice(cloud.payload(i));
            void_mask[k] = false;
        }
    }
    let valid: Vec<bool> = void_mask.iter().map(|v| !v).collect();
    let warped = FieldStack::from_data(w, h, ch, data)
        .and_then(|f| f.with_mask(valid))
        .expect("splat output sized from camera");
    let depth = FieldStack::from_data(w, h, 1, zbuf).expect("depth sized from camera");
    WarpResult {
        warped,
        void_mask,
        depth,
    }
}

/// Transports `channels` from `src` to `dst` through the surface described
/// by `depth` (seen from `src`).
pub fn warp_view(
    channels: &FieldStack,
    depth: &FieldStack,
    src: &CameraView,
    dst: &CameraView,
) -> Result<WarpResult> {
    Ok(splat(&lift_depth(channels, depth, src)?, dst))
}

/// Downsamples a depth map by keeping, per block, the nearest valid depth.
/// Blocks without a valid positive depth become invalid.
pub fn downsample_depth_min(depth: &FieldStack, factor: usize) -> Result<FieldStack> {
    if depth.channels() != 1 {
        return shape_err("depth must have one channel");
    }
    if factor == 0 || !depth.width().is_multiple_of(factor) || !depth.height().is_multiple_of(factor) {
        return Err(Error::Contract(format!(
            "depth downsample factor {factor} does not divide {}x{}",
            depth.width(),
            depth.height()
        )));
    }
    if factor == 1 {
        return Ok(depth.clone());
    }
    let (w, h) = (depth.width() / factor, depth.height() / factor);
    let mut out = vec![f64::INFINITY; w * h];
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = depth.get(x, y, 0);
            if depth.is_valid(x, y) && d > 0.0 && d.is_finite() {
                let k = (y / factor) * w + x / factor;
                out[k] = out[k].min(d);
            }
        }
    }
    let mask = out.iter().map(|d| d.is_finite()).collect();
    let data = out.into_iter().map(|d| if d.is_finite() { d } else { 0.0 }).collect();
    FieldStack::from_data(w, h, 1, data)?.with_mask(mask)
}
