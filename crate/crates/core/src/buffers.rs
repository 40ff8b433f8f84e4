//! Raster buffers shared by the loaders, rasterizer, renderer, and losses.

use crate::error::{Error, Result};

/// RGB image with linear values in `[0, 1]`, row-major, three channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` values, pixel-interleaved RGB.
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_resolution(&self, other: &ImageBuffer) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ResolutionMismatch {
                left_width: self.width,
                left_height: self.height,
                right_width: other.width,
                right_height: other.height,
            });
        }
        Ok(())
    }

    /// Mean squared difference over all pixels and channels.
    pub fn mse(&self, other: &ImageBuffer) -> Result<f64> {
        self.same_resolution(other)?;
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel accumulated opacity of a volume render, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl AlphaMap {
    pub fn new(width: usize, height: usize) -> Self {
        AlphaMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, a: f64) {
        self.data[y * self.width + x] = a;
    }

    /// Binarize at a threshold, yielding a silhouette.
    pub fn threshold(&self, level: f64) -> SilhouetteMask {
        SilhouetteMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&a| a >= level).collect(),
        }
    }
}

/// Boolean coverage mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl SilhouetteMask {
    pub fn new(width: usize, height: usize) -> Self {
        SilhouetteMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn iou(&self, other: &SilhouetteMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            if *a && *b {
                inter += 1;
            }
            if *a || *b {
                union += 1;
            }
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Per-pixel body-part labels; 0 is background, `1..=K` are part ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize) -> Self {
        SegmentationMap {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u16) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_silhouette(&self) -> SilhouetteMask {
        SilhouetteMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// Inclusive pixel rectangle: covers columns `x0..=x1` and rows `y0..=y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelRect {
    pub fn single(x: i64, y: i64) -> Self {
        PixelRect {
            x0: x,
            y0: y,
            x1: x,
            y1: y,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        PixelRect {
            x0: 0,
            y0: 0,
            x1: width as i64 - 1,
            y1: height as i64 - 1,
        }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0 + 1
    }

    /// Center in continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1 + 1) as f64 * 0.5,
            (self.y0 + self.y1 + 1) as f64 * 0.5,
        )
    }

    /// Tight union of this rect and a pixel.
    pub fn include(&mut self, x: i64, y: i64) {
        self.x0 = self.x0.min(x);
        self.y0 = self.y0.min(y);
        self.x1 = self.x1.max(x);
        self.y1 = self.y1.max(y);
    }

    pub fn dilated(&self, margin: i64) -> PixelRect {
        PixelRect {
            x0: self.x0 - margin,
            y0: self.y0 - margin,
            x1: self.x1 + margin,
            y1: self.y1 + margin,
        }
    }

    pub fn clamped(&self, width: usize, height: usize) -> PixelRect {
        PixelRect {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(width as i64 - 1),
            y1: self.y1.min(height as i64 - 1),
        }
    }
}
