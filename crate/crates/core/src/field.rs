//! Dense H×W×C real-valued grids with an optional per-pixel validity mask.
//!
//! One type carries images, latents, depth maps, normals and noise so the
//! warping code can transport any of them uniformly.
//!
//! On disk a field is a 16-byte header (`"FSTK"`, then little-endian `u32`
//! width, height, channels), the samples as little-endian `f32` in row-major
//! pixel-interleaved order, and optionally one `u8` per pixel holding the mask.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"FSTK";

#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    valid_mask: Option<Vec<bool>>,
}

impl FieldStack {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            valid_mask: None,
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return shape_err(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            valid_mask: None,
        })
    }

    /// Builds a field by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
            valid_mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.width * self.height {
            return shape_err(format!(
                "mask length {} != {}x{}",
                mask.len(),
                self.width,
                self.height
            ));
        }
        self.valid_mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.valid_mask = None;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn valid_mask(&self) -> Option<&[bool]> {
        self.valid_mask.as_deref()
    }

    /// True when the pixel is not masked out (or no mask is present).
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid_mask
            .as_ref()
            .is_none_or(|m| m[y * self.width + x])
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &FieldStack) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_extent(&self, other: &FieldStack) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn expect_shape(&self, other: &FieldStack, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            shape_err(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FieldStack {
        FieldStack {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Elementwise `a * self + b * other`. The result carries no mask.
    pub fn axpby(&self, a: f64, other: &FieldStack, b: f64) -> Result<FieldStack> {
        self.expect_shape(other, "axpby")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        FieldStack::from_data(self.width, self.height, self.channels, data)
    }

    pub fn sub(&self, other: &FieldStack) -> Result<FieldStack> {
        self.axpby(1.0, other, -1.0)
    }

    pub fn add(&self, other: &FieldStack) -> Result<FieldStack> {
        self.axpby(1.0, other, 1.0)
    }

    pub fn scale(&self, s: f64) -> FieldStack {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &FieldStack) -> Result<f64> {
        self.expect_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Stacks the channels of several same-sized fields, in order.
    pub fn concat_channels(parts: &[&FieldStack]) -> Result<FieldStack> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero fields".into()))?;
        let (w, h) = (first.width, first.height);
        if let Some(p) = parts.iter().find(|p| p.width != w || p.height != h) {
            return shape_err(format!(
                "concat: {}x{} vs {}x{}",
                w, h, p.width, p.height
            ));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(w * h * channels);
        for i in 0..w * h {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        FieldStack::from_data(w, h, channels, data)
    }

    /// Copies out channels `start..start + count`.
    pub fn channel_range(&self, start: usize, count: usize) -> Result<FieldStack> {
        if start + count > self.channels {
            return shape_err(format!(
                "channel range {start}..{} of {}",
                start + count,
                self.channels
            ));
        }
        let mut data = Vec::with_capacity(self.pixel_count() * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        FieldStack::from_data(self.width, self.height, count, data)
    }

    /// Block-average downsampling by an integer factor. Masks are dropped.
    pub fn avg_pool(&self, factor: usize) -> Result<FieldStack> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::Contract(format!(
                "avg_pool factor {factor} does not divide {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = FieldStack::zeros(w, h, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let dst = out.pixel_mut(x / factor, y / factor);
                for (d, s) in dst.iter_mut().zip(self.pixel(x, y)) {
                    *d += s * inv;
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> FieldStack {
        FieldStack::from_fn(
            self.width * factor,
            self.height * factor,
            self.channels,
            |x, y, c| self.get(x / factor, y / factor, c),
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4 + self.pixel_count());
        buf.extend_from_slice(MAGIC);
        for d in [self.width, self.height, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(mask) = &self.valid_mask {
            buf.extend(mask.iter().map(|&m| m as u8));
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<FieldStack> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing FSTK header".into()));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (w, h, c) = (dim(4), dim(8), dim(12));
        let n = w * h * c;
        let body = &bytes[16..];
        let has_mask = match body.len() {
            l if l == n * 4 => false,
            l if l == n * 4 + w * h => true,
            l => {
                return Err(Error::Format(format!(
                    "FSTK {w}x{h}x{c}: payload of {l} bytes"
                )))
            }
        };
        let data = body[..n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let mut field = FieldStack::from_data(w, h, c, data)?;
        if has_mask {
            let mask = body[n * 4..].iter().map(|&b| b != 0).collect();
            field = field.with_mask(mask)?;
        }
        Ok(field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FieldStack> {
        let f = std::fs::File::open(path)?;
        FieldStack::read_from(std::io::BufReader::new(f))
    }

    /// Writes a 1-, 3- or 4-channel field as an 8-bit PNG, mapping [0, 1]
    /// linearly onto [0, 255] and clamping outside that range.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => {
                return Err(Error::Contract(format!(
                    "PNG export needs 1, 3 or 4 channels, got {c}"
                )))
            }
        };
        image::save_buffer(path, &bytes, w, h, color)?;
        Ok(())
    }

    /// Reads an 8-bit PNG. Grey, RGB and RGBA images keep their channel
    /// count; values are mapped to [0, 1].
    pub fn load_png(path: impl AsRef<Path>) -> Result<FieldStack> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color().channel_count() {
            1 | 2 => (1, img.into_luma8().into_raw()),
            3 => (3, img.into_rgb8().into_raw()),
            _ => (4, img.into_rgba8().into_raw()),
        };
        let data = raw.into_iter().map(|b| b as f64 / 255.0).collect();
        FieldStack::from_data(w, h, channels, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(FieldStack::from_data(2, 2, 3, vec![0.0; 11]).is_err());
        let f = FieldStack::zeros(2, 2, 1);
        assert!(f.with_mask(vec![true; 3]).is_err());
    }

    #[test]
    fn binary_header_layout() {
        let f = FieldStack::from_fn(3, 2, 2, |x, y, c| (x + 10 * y + 100 * c) as f64)
            .with_mask(vec![true, false, true, true, false, true])
            .unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FSTK");
        assert_eq!(&buf[4..8], &3u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 16 + 12 * 4 + 6);
        let back = FieldStack::read_from(&buf[..]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        FieldStack::zeros(4, 4, 1).write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            FieldStack::read_from(&buf[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn png_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let f = FieldStack::from_fn(5, 4, 3, |x, y, c| ((x + y + c) % 4) as f64 / 3.0);
        f.save_png(&path).unwrap();
        let back = FieldStack::load_png(&path).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in f.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert!(FieldStack::zeros(2, 2, 2).save_png(&path).is_err());
    }

    #[test]
    fn pooling_and_upsampling() {
        let f = FieldStack::from_fn(4, 4, 1, |x, y, _| (x + 4 * y) as f64);
        let p = f.avg_pool(2).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = p.upsample_nearest(2);
        assert_eq!(u.get(1, 1, 0), 2.5);
        assert_eq!(u.get(3, 2, 0), 12.5);
        assert!(f.avg_pool(3).is_err());
    }

    #[test]
    fn concat_and_split_channels() {
        let a = FieldStack::filled(2, 1, 1, 1.0);
        let b = FieldStack::filled(2, 1, 2, 2.0);
        let c = FieldStack::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 2.0, 1.0, 2.0, 2.0]);
        assert_eq!(c.channel_range(1, 2).unwrap(), b);
        assert!(FieldStack::concat_channels(&[&a, &FieldStack::zeros(3, 1, 1)]).is_err());
    }
}
