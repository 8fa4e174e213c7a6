use serde::{Deserialize, Serialize};

use crate::img::Image;
use crate::metrics::{l1_grad, ssim_rgb_grad, PerceptualDistance, ShapeMismatch};

/// Weights of the photometric loss on real views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconWeights {
    pub l1: f64,
    pub ssim: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self { l1: 0.8, ssim: 0.2 }
    }
}

/// Weights of the pseudo ground-truth loss; `l1` is kept well below
/// `perceptual`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoWeights {
    pub perceptual: f64,
    pub l1: f64,
}

impl Default for PseudoWeights {
    fn default() -> Self {
        Self { perceptual: 1.0, l1: 0.1 }
    }
}

fn check(a: &Image, b: &Image) -> Result<(), ShapeMismatch> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(ShapeMismatch(a.width, a.height, b.width, b.height))
    }
}

fn axpy(acc: &mut [[f64; 3]], a: f64, x: &[[f64; 3]]) {
    for (o, v) in acc.iter_mut().zip(x) {
        for ch in 0..3 {
            o[ch] += a * v[ch];
        }
    }
}

/// `λ_L1·mean|render − gt| + λ_SSIM·(1 − SSIM)` and its image gradient.
pub fn reconstruction_loss(render: &Image, gt: &Image, w: &ReconWeights) -> Result<(f64, Vec<[f64; 3]>), ShapeMismatch> {
    check(render, gt)?;
    let mut grad = vec![[0.0; 3]; render.len()];
    let mut loss = 0.0;
    if w.l1 != 0.0 {
        let (l, g) = l1_grad(render, gt)?;
        loss += w.l1 * l;
        axpy(&mut grad, w.l1, &g);
    }
    if w.ssim != 0.0 {
        let (s, g) = ssim_rgb_grad(render, gt)?;
        loss += w.ssim * (1.0 - s);
        axpy(&mut grad, -w.ssim, &g);
    }
    Ok((loss, grad))
}

/// `λ_perc·D_perc(render, pseudo) + λ_L1·mean|render − pseudo|`.
pub fn pseudo_loss(
    render: &Image,
    pseudo: &Image,
    w: &PseudoWeights,
    perceptual: &dyn PerceptualDistance,
) -> Result<(f64, Vec<[f64; 3]>), ShapeMismatch> {
    check(render, pseudo)?;
    let mut grad = vec![[0.0; 3]; render.len()];
    let mut loss = 0.0;
    if w.perceptual != 0.0 {
        let (d, g) = perceptual.eval(render, pseudo)?;
        loss += w.perceptual * d;
        axpy(&mut grad, w.perceptual, &g);
    }
    if w.l1 != 0.0 {
        let (l, g) = l1_grad(render, pseudo)?;
        loss += w.l1 * l;
        axpy(&mut grad, w.l1, &g);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MultiScaleSsim;

    #[test]
    fn identical_images_cost_nothing() {
        let a = Image::from_fn(8, 8, |x, y| [x as f64 / 8.0, y as f64 / 8.0, 0.3]);
        assert!(reconstruction_loss(&a, &a, &ReconWeights::default()).unwrap().0.abs() < 1e-12);
        let p = pseudo_loss(&a, &a, &PseudoWeights::default(), &MultiScaleSsim::default()).unwrap();
        assert!(p.0.abs() < 1e-12);
    }

    #[test]
    fn constant_offset_l1_only() {
        let a = Image::filled(8, 8, [0.5; 3]);
        let b = Image::filled(8, 8, [0.6; 3]);
        let (l, _) = reconstruction_loss(&a, &b, &ReconWeights { l1: 1.0, ssim: 0.0 }).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn zero_l1_weight_leaves_perceptual_term() {
        let a = Image::from_fn(8, 8, |x, y| [(x * y) as f64 / 64.0, 0.2, 0.9]);
        let b = a.map(|c| c.map(|v| v * 0.7));
        let m = MultiScaleSsim::default();
        let w = PseudoWeights { perceptual: 1.3, l1: 0.0 };
        let (l, _) = pseudo_loss(&a, &b, &w, &m).unwrap();
        assert!((l - 1.3 * m.eval(&a, &b).unwrap().0).abs() < 1e-15);
    }

    #[test]
    fn default_pseudo_weights_down_weight_l1() {
        let w = PseudoWeights::default();
        assert!(w.l1 < w.perceptual && w.l1 >= 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Image::new(4, 4);
        let b = Image::new(4, 5);
        assert!(reconstruction_loss(&a, &b, &ReconWeights::default()).is_err());
    }
}
