//! Image values, regions, content hashing, and PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel buffer length {got} does not match {channels}x{height}x{width}")]
    ShapeMismatch {
        got: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("unsupported channel count {0} for PNG output (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("failed to read image {path}: {message}")]
    Read { path: String, message: String },
    #[error("failed to write image {path}: {message}")]
    Write { path: String, message: String },
}

/// Dense image with intensities in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if pixels.len() != channels * height * width {
            return Err(ImageError::ShapeMismatch {
                got: pixels.len(),
                channels,
                height,
                width,
            });
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Mean intensity over a region, averaged across channels.
    pub fn region_mean(&self, region: &Region) -> f64 {
        let (y0, y1, x0, x1) = region.bounds(self.height, self.width);
        let mut acc = 0.0;
        let mut n = 0usize;
        for c in 0..self.channels {
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += self.get(c, y, x);
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }

    /// Canonical byte encoding (dims + little-endian f64 pixels); detector
    /// determinism is defined over these bytes.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.pixels.len() * 8);
        out.extend_from_slice(&(self.channels as u64).to_le_bytes());
        out.extend_from_slice(&(self.height as u64).to_le_bytes());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Hex SHA-256 of the canonical byte encoding.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_bytes());
        hex_string(&hasher.finalize())
    }

    /// Short content reference, e.g. `sha256:3f9ab2c1d4e5f607`.
    pub fn content_ref(&self) -> String {
        format!("sha256:{}", &self.content_hash()[..16])
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let wrap = |e: image::ImageError| ImageError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        match self.channels {
            1 => {
                let mut img = image::GrayImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        img.put_pixel(x as u32, y as u32, image::Luma([to_u8(self.get(0, y, x))]));
                    }
                }
                img.save(path).map_err(wrap)
            }
            3 => {
                let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
                for y in 0..self.height {
                    for x in 0..self.width {
                        let px = image::Rgb([
                            to_u8(self.get(0, y, x)),
                            to_u8(self.get(1, y, x)),
                            to_u8(self.get(2, y, x)),
                        ]);
                        img.put_pixel(x as u32, y as u32, px);
                    }
                }
                img.save(path).map_err(wrap)
            }
            c => Err(ImageError::UnsupportedChannels(c)),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let wrap = |message: String| ImageError::Read {
            path: path.display().to_string(),
            message,
        };
        let img = image::open(path).map_err(|e| wrap(e.to_string()))?;
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let pixels = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
                Image::new(1, h, w, pixels)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut pixels = vec![0.0; 3 * h * w];
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        pixels[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
                    }
                }
                Image::new(3, h, w, pixels)
            }
        }
    }
}

/// Axis-aligned image region; quadrants are the common case for the
/// synthetic detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Full,
}

impl Region {
    /// Half-open pixel bounds `(y0, y1, x0, x1)` of the region.
    pub fn bounds(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (hy, hx) = (height / 2, width / 2);
        match self {
            Region::TopLeft => (0, hy, 0, hx),
            Region::TopRight => (0, hy, hx, width),
            Region::BottomLeft => (hy, height, 0, hx),
            Region::BottomRight => (hy, height, hx, width),
            Region::Full => (0, height, 0, width),
        }
    }

    pub fn contains(&self, y: usize, x: usize, height: usize, width: usize) -> bool {
        let (y0, y1, x0, x1) = self.bounds(height, width);
        y >= y0 && y < y1 && x >= x0 && x < x1
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_clamps_and_checks_shape() {
        let img = Image::new(1, 2, 2, vec![-1.0, 0.5, 2.0, 1.0]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 0.5, 1.0, 1.0]);
        assert!(Image::new(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn region_means() {
        // 2x2 image: quadrants are single pixels.
        let img = Image::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(img.region_mean(&Region::TopLeft), 1.0);
        assert_eq!(img.region_mean(&Region::BottomRight), 0.0);
        assert_eq!(img.region_mean(&Region::Full), 0.25);
    }

    #[test]
    fn content_hash_tracks_bytes() {
        let a = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let c = Image::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.5]).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert!(a.content_ref().starts_with("sha256:"));
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = Image::new(1, 4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
