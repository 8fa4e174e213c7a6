//! Image-quality metrics and differentiable photometric losses.

use thiserror::Error;

use crate::img::{Image, Plane};

#[derive(Debug, Error)]
#[error("image shapes differ: {0}x{1} vs {2}x{3}")]
pub struct ShapeMismatch(pub usize, pub usize, pub usize, pub usize);

fn same(a: &Image, b: &Image) -> Result<(), ShapeMismatch> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(ShapeMismatch(a.width, a.height, b.width, b.height))
    }
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`; `+∞` for identical
/// images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ShapeMismatch> {
    same(a, b)?;
    let mut se = 0.0;
    for (p, q) in a.data.iter().zip(&b.data) {
        for ch in 0..3 {
            se += (p[ch] - q[ch]).powi(2);
        }
    }
    let mse = se / (3 * a.len()) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

/// Separable Gaussian blur whose window is truncated at the border and
/// renormalized to unit mass.
struct Blur {
    w: usize,
    h: usize,
    k: [f64; SSIM_WINDOW],
    /// Per-position normalizers along x and y.
    zx: Vec<f64>,
    zy: Vec<f64>,
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        let k = kernel();
        let norm = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|p| {
                    let mut z = 0.0;
                    for (i, kv) in k.iter().enumerate() {
                        let q = p as isize + i as isize - (SSIM_WINDOW / 2) as isize;
                        if q >= 0 && (q as usize) < n {
                            z += kv;
                        }
                    }
                    z
                })
                .collect()
        };
        Self { w, h, k, zx: norm(w), zy: norm(h) }
    }

    fn pass(&self, src: &[f64], horizontal: bool, transpose: bool) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let r = (SSIM_WINDOW / 2) as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (p, n, z) = if horizontal { (x, w, &self.zx) } else { (y, h, &self.zy) };
                let v = src[y * w + x];
                if transpose {
                    // Scatter this output gradient back onto its inputs.
                    let g = v / z[p];
                    for (i, kv) in self.k.iter().enumerate() {
                        let q = p as isize + i as isize - r;
                        if q >= 0 && (q as usize) < n {
                            let idx = if horizontal { y * w + q as usize } else { q as usize * w + x };
                            out[idx] += kv * g;
                        }
                    }
                } else {
                    let mut acc = 0.0;
                    for (i, kv) in self.k.iter().enumerate() {
                        let q = p as isize + i as isize - r;
                        if q >= 0 && (q as usize) < n {
                            let idx = if horizontal { y * w + q as usize } else { q as usize * w + x };
                            acc += kv * src[idx];
                        }
                    }
                    out[y * w + x] = acc / z[p];
                }
            }
        }
        out
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, true, false), false, false)
    }

    fn apply_t(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, false, true), true, true)
    }
}

/// Mean windowed SSIM of two single-channel planes and, optionally, its
/// gradient with respect to `x`.
fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let blur = Blur::new(w, h);
    let n = w * h;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (blur.apply(x), blur.apply(y));
    let (exx, eyy, exy) = (blur.apply(&xx), blur.apply(&yy), blur.apply(&xy));
    let mut total = 0.0;
    let mut g_mx = vec![0.0; n];
    let mut g_exx = vec![0.0; n];
    let mut g_exy = vec![0.0; n];
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * (exy[p] - ux * uy) + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let g = 1.0 / n as f64;
            g_mx[p] = g * s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            g_exx[p] = -g * s / b2;
            g_exy[p] = g * s * 2.0 / a2;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, None);
    }
    let (t_mx, t_exx, t_exy) = (blur.apply_t(&g_mx), blur.apply_t(&g_exx), blur.apply_t(&g_exy));
    let grad = (0..n).map(|p| t_mx[p] + 2.0 * x[p] * t_exx[p] + y[p] * t_exy[p]).collect();
    (mean, Some(grad))
}

/// SSIM on luma with an 11-tap Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03, unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, ShapeMismatch> {
    same(a, b)?;
    let (la, lb) = (a.luma(), b.luma());
    Ok(ssim_plane(&la.data, &lb.data, a.width, a.height, false).0)
}

/// Per-plane SSIM (exposed for oracle tests).
pub fn ssim_gray(a: &Plane, b: &Plane) -> f64 {
    assert!(a.same_shape(b));
    ssim_plane(&a.data, &b.data, a.width, a.height, false).0
}

/// Mean of the three per-channel SSIMs and its gradient w.r.t. `a`.
pub fn ssim_rgb_grad(a: &Image, b: &Image) -> Result<(f64, Vec<[f64; 3]>), ShapeMismatch> {
    same(a, b)?;
    let mut grad = vec![[0.0; 3]; a.len()];
    let mut total = 0.0;
    for ch in 0..3 {
        let (pa, pb) = (a.channel(ch), b.channel(ch));
        let (s, g) = ssim_plane(&pa.data, &pb.data, a.width, a.height, true);
        total += s / 3.0;
        for (dst, v) in grad.iter_mut().zip(g.unwrap()) {
            dst[ch] = v / 3.0;
        }
    }
    Ok((total, grad))
}

/// Mean absolute error over all channels and its gradient w.r.t. `a`.
pub fn l1_grad(a: &Image, b: &Image) -> Result<(f64, Vec<[f64; 3]>), ShapeMismatch> {
    same(a, b)?;
    let n = (3 * a.len()) as f64;
    let mut total = 0.0;
    let grad = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| {
            [0, 1, 2].map(|ch| {
                let d = p[ch] - q[ch];
                total += d.abs();
                if d > 0.0 {
                    1.0 / n
                } else if d < 0.0 {
                    -1.0 / n
                } else {
                    0.0
                }
            })
        })
        .collect();
    Ok((total / n, grad))
}

/// 2×2 box average; odd trailing rows/columns are dropped.
pub fn downsample(img: &Image) -> Image {
    let (w, h) = (img.width / 2, img.height / 2);
    Image::from_fn(w, h, |x, y| {
        let mut c = [0.0; 3];
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = img.at(2 * x + dx, 2 * y + dy);
            for ch in 0..3 {
                c[ch] += 0.25 * p[ch];
            }
        }
        c
    })
}

fn downsample_backward(g: &[[f64; 3]], w: usize, h: usize, full_w: usize, full_h: usize) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]; full_w * full_h];
    for y in 0..h {
        for x in 0..w {
            let v = g[y * w + x];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let o = &mut out[(2 * y + dy) * full_w + 2 * x + dx];
                for ch in 0..3 {
                    o[ch] += 0.25 * v[ch];
                }
            }
        }
    }
    out
}

/// Perceptual distance between a render and a reference; the trainer uses
/// it for pseudo ground truth.
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;
    /// Distance and its gradient with respect to `render`.
    fn eval(&self, render: &Image, reference: &Image) -> Result<(f64, Vec<[f64; 3]>), ShapeMismatch>;
}

/// Mean of `1 − SSIM` over a pyramid of 2×2 box-downsampled scales.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleSsim {
    pub scales: usize,
}

impl Default for MultiScaleSsim {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

impl PerceptualDistance for MultiScaleSsim {
    fn name(&self) -> &str {
        "ms-ssim"
    }

    fn eval(&self, render: &Image, reference: &Image) -> Result<(f64, Vec<[f64; 3]>), ShapeMismatch> {
        same(render, reference)?;
        let mut levels = vec![(render.clone(), reference.clone())];
        while levels.len() < self.scales.max(1) {
            let (a, b) = levels.last().unwrap();
            if a.width < 2 || a.height < 2 {
                break;
            }
            levels.push((downsample(a), downsample(b)));
        }
        let k = levels.len() as f64;
        let mut total = 0.0;
        // Gradient flows coarse to fine through the downsampling chain.
        let mut carry: Option<Vec<[f64; 3]>> = None;
        for li in (0..levels.len()).rev() {
            let (a, b) = &levels[li];
            let (s, g) = ssim_rgb_grad(a, b)?;
            total += (1.0 - s) / k;
            let mut here: Vec<[f64; 3]> = g.iter().map(|v| v.map(|x| -x / k)).collect();
            if let Some(c) = carry.take() {
                let (cw, ch) = (levels[li + 1].0.width, levels[li + 1].0.height);
                let up = downsample_backward(&c, cw, ch, a.width, a.height);
                for (h, u) in here.iter_mut().zip(up) {
                    for c in 0..3 {
                        h[c] += u[c];
                    }
                }
            }
            carry = Some(here);
        }
        Ok((total, carry.unwrap()))
    }
}

/// PSNR, luma SSIM and perceptual distance of one image pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub d_perc: f64,
}

pub fn evaluate(render: &Image, reference: &Image) -> Result<Metrics, ShapeMismatch> {
    Ok(Metrics {
        psnr: psnr(render, reference)?,
        ssim: ssim(render, reference)?,
        d_perc: MultiScaleSsim::default().eval(render, reference)?.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.2; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.3; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 4, [0.7; 3]);
        assert!((psnr(&a, &c).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let a = Image::from_fn(13, 9, |x, y| [(x as f64 * 0.07) % 1.0, (y as f64 * 0.11) % 1.0, 0.5]);
        let b = a.map(|c| c.map(|v| (v * 0.8 + 0.1).min(1.0)));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-15);
        // Constant images: σ terms vanish and SSIM = C1 / (1 + C1).
        let white = Image::filled(16, 16, [1.0; 3]);
        let black = Image::filled(16, 16, [0.0; 3]);
        let c1 = SSIM_K1 * SSIM_K1;
        assert!((ssim(&white, &black).unwrap() - c1 / (1.0 + c1)).abs() < 1e-15);
    }

    #[test]
    fn blur_transpose_is_adjoint() {
        let blur = Blur::new(7, 5);
        let u: Vec<f64> = (0..35).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let v: Vec<f64> = (0..35).map(|i| ((i * 13) % 7) as f64 * 0.3).collect();
        let bu = blur.apply(&u);
        let btv = blur.apply_t(&v);
        let lhs: f64 = bu.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&btv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn l1_of_constant_offset() {
        let a = Image::filled(3, 3, [0.5; 3]);
        let b = Image::filled(3, 3, [0.4; 3]);
        assert!((l1_grad(&a, &b).unwrap().0 - 0.1).abs() < 1e-12);
    }
}
