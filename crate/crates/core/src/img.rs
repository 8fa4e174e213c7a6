//! Float image buffers used by every renderer and loss.

use serde::{Deserialize, Serialize};

/// Row-major RGB image with `f64` channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// Row-major single-channel image (opacity, depth).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, c: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![c; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        }
    }

    pub fn from_channels(r: &Plane, g: &Plane, b: &Plane) -> Self {
        Self {
            width: r.width,
            height: r.height,
            data: r
                .data
                .iter()
                .zip(&g.data)
                .zip(&b.data)
                .map(|((&r, &g), &b)| [r, g, b])
                .collect(),
        }
    }

    /// Rec. 601 luma.
    pub fn luma(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn mean(&self) -> [f64; 3] {
        let n = self.data.len().max(1) as f64;
        let mut m = [0.0; 3];
        for p in &self.data {
            for c in 0..3 {
                m[c] += p[c];
            }
        }
        m.map(|v| v / n)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Quantizes through 8 bits, as a PNG round trip would.
    pub fn quantized(&self) -> Self {
        self.map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
    }
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Gray RGB view for previews.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| [v; 3]).collect(),
        }
    }
}
