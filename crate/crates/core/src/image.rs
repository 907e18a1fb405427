//! Multi-channel feature images.

use crate::error::{Error, Result};

/// An `H×W×C` array of real features stored row-major (pixel-interleaved).
///
/// The same type carries encoder inputs and per-pixel correspondence
/// features, so synthetic channels and externally computed features are
/// interchangeable.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Dense per-pixel features used for contact correspondence.
pub type PixelFeatureMap = FeatureImage;

impl FeatureImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract(format!(
                "feature image dimensions must be positive: {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension {
                op: "feature_image",
                lhs: vec![height, width, channels],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Mirror about the vertical axis. Channels listed in `odd_channels`
    /// hold x-components of vector fields and are negated.
    pub fn hflip(&self, odd_channels: &[usize]) -> FeatureImage {
        let mut out = FeatureImage::zeros(self.height, self.width, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.pixel(self.width - 1 - x, y);
                let dst = out.pixel_mut(x, y);
                dst.copy_from_slice(src);
                for &c in odd_channels {
                    dst[c] = -dst[c];
                }
            }
        }
        out
    }

    /// Non-overlapping `p×p` patches flattened in raster order, one row per
    /// patch (`[(H/p)(W/p)] × [p·p·C]`).
    pub fn patchify(&self, p: usize) -> Result<(usize, usize, Vec<f64>)> {
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::contract(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / p, self.width / p);
        let patch_dim = p * p * self.channels;
        let mut out = Vec::with_capacity(gh * gw * patch_dim);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let y = py * p + dy;
                    let start = (y * self.width + px * p) * self.channels;
                    out.extend_from_slice(&self.data[start..start + p * self.channels]);
                }
            }
        }
        Ok((gh * gw, patch_dim, out))
    }
}
