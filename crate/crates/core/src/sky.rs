//! Equirectangular environment texture for infinitely distant background.
//!
//! Row 0 is the zenith and row `H − 1` the nadir. Column `u` covers azimuth
//! `atan2(y, x)` from −π to π. Sampling is bilinear between texel centers,
//! wrapping in azimuth and clamping in elevation.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{pixel_rays, Camera, Pose, Vec3};
use crate::img::Image;
use crate::io::{read_pfm_rgb, write_pfm_rgb, write_png, IoError};

#[derive(Debug, Error)]
pub enum SkyError {
    #[error("sky direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("sky texture shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkyMap {
    pub texture: Image,
}

/// Four texel indices and their bilinear weights.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
}

pub const DEFAULT_WIDTH: usize = 256;
pub const DEFAULT_HEIGHT: usize = 128;

impl SkyMap {
    pub fn new(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        assert!(width >= 1 && height >= 1);
        Self {
            texture: Image::filled(width, height, rgb),
        }
    }

    pub fn uniform(rgb: [f64; 3]) -> Self {
        Self::new(DEFAULT_WIDTH, DEFAULT_HEIGHT, rgb)
    }

    pub fn width(&self) -> usize {
        self.texture.width
    }

    pub fn height(&self) -> usize {
        self.texture.height
    }

    /// Bilinear taps for a direction assumed to be unit length.
    pub fn taps(&self, d: &Vec3) -> Taps {
        let (w, h) = (self.width(), self.height());
        let u = (d.y.atan2(d.x) + PI) / (2.0 * PI) * w as f64 - 0.5;
        let v = (FRAC_PI_2 - d.z.clamp(-1.0, 1.0).asin()) / PI * h as f64 - 0.5;
        let uf = u.floor();
        let fu = u - uf;
        let i0 = (uf as i64).rem_euclid(w as i64) as usize;
        let i1 = (i0 + 1) % w;
        let (j0, j1, fv) = if v <= 0.0 {
            (0, 0, 0.0)
        } else if v >= (h - 1) as f64 {
            (h - 1, h - 1, 0.0)
        } else {
            let j = v.floor() as usize;
            (j, j + 1, v - j as f64)
        };
        Taps {
            index: [j0 * w + i0, j0 * w + i1, j1 * w + i0, j1 * w + i1],
            weight: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        }
    }

    pub fn sample(&self, d: &Vec3) -> Result<[f64; 3], SkyError> {
        let n = d.norm();
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(SkyError::NonUnitDirection(n));
        }
        Ok(self.sample_taps(&self.taps(d)))
    }

    pub fn sample_taps(&self, t: &Taps) -> [f64; 3] {
        let mut c = [0.0; 3];
        for q in 0..4 {
            let texel = self.texture.data[t.index[q]];
            for ch in 0..3 {
                c[ch] += t.weight[q] * texel[ch];
            }
        }
        c
    }

    /// Adds `upstream · ∂color/∂texel` for one lookup into `grad`.
    pub fn backward_taps(t: &Taps, upstream: [f64; 3], grad: &mut [[f64; 3]]) {
        for q in 0..4 {
            for ch in 0..3 {
                grad[t.index[q]][ch] += t.weight[q] * upstream[ch];
            }
        }
    }

    pub fn zero_grad(&self) -> Vec<[f64; 3]> {
        vec![[0.0; 3]; self.texture.data.len()]
    }

    /// Background color seen through every pixel.
    pub fn render(&self, camera: &Camera, pose: &Pose) -> Image {
        let data = pixel_rays(camera, pose)
            .par_iter()
            .map(|r| self.sample_taps(&self.taps(&r.direction)))
            .collect();
        Image {
            width: camera.width as usize,
            height: camera.height as usize,
            data,
        }
    }

    /// Texel gradients for a per-pixel upstream gradient of [`SkyMap::render`].
    pub fn render_backward(&self, camera: &Camera, pose: &Pose, upstream: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let rays = pixel_rays(camera, pose);
        assert_eq!(rays.len(), upstream.len());
        let chunk = (camera.width as usize) * 8;
        let parts: Vec<Vec<(Taps, [f64; 3])>> = rays
            .par_chunks(chunk)
            .zip(upstream.par_chunks(chunk))
            .map(|(rs, us)| {
                rs.iter()
                    .zip(us)
                    .filter(|(_, u)| **u != [0.0; 3])
                    .map(|(r, u)| (self.taps(&r.direction), *u))
                    .collect()
            })
            .collect();
        let mut grad = self.zero_grad();
        for part in parts {
            for (t, u) in part {
                Self::backward_taps(&t, u, &mut grad);
            }
        }
        grad
    }

    /// Fills the texture with the mean color of the top `rows` rows of the
    /// given images.
    pub fn init_from_top_rows(width: usize, height: usize, images: &[&Image], rows: usize) -> Self {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for img in images {
            for y in 0..rows.min(img.height) {
                for x in 0..img.width {
                    let p = img.at(x, y);
                    for ch in 0..3 {
                        acc[ch] += p[ch];
                    }
                    n += 1;
                }
            }
        }
        let mean = if n == 0 { [0.5; 3] } else { acc.map(|v| v / n as f64) };
        Self::new(width, height, mean)
    }

    /// Writes `<stem>.pfm` (authoritative) and `<stem>.png` (preview).
    pub fn save(&self, stem: &Path) -> Result<(), SkyError> {
        write_pfm_rgb(&stem.with_extension("pfm"), &self.texture)?;
        write_png(&stem.with_extension("png"), &self.texture)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, SkyError> {
        let texture = read_pfm_rgb(&stem.with_extension("pfm"))?;
        Ok(Self { texture })
    }
}
