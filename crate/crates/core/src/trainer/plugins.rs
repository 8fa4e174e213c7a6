use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::Pose;
use crate::img::Image;

#[derive(Debug, Error)]
#[error("fixer failed: {0}")]
pub struct FixError(pub String);

/// Turns a render at `pose` into a cleaner image of the same shape.
pub trait Fixer: Send + Sync {
    fn name(&self) -> &str;
    fn fix(&self, render: &Image, pose: &Pose) -> Result<Image, FixError>;
}

pub struct IdentityFixer;

impl Fixer for IdentityFixer {
    fn name(&self) -> &str {
        "identity"
    }

    fn fix(&self, render: &Image, _pose: &Pose) -> Result<Image, FixError> {
        Ok(render.clone())
    }
}

pub type GroundTruthFn = Arc<dyn Fn(&Pose) -> Image + Send + Sync>;

/// Returns the true image at the pose: an upper bound on any real fixer.
pub struct OracleFixer {
    pub ground_truth: GroundTruthFn,
}

impl Fixer for OracleFixer {
    fn name(&self) -> &str {
        "oracle"
    }

    fn fix(&self, render: &Image, pose: &Pose) -> Result<Image, FixError> {
        let gt = (self.ground_truth)(pose);
        if !gt.same_shape(render) {
            return Err(FixError("ground truth resolution differs from the render".into()));
        }
        Ok(gt)
    }
}

/// The oracle image after a box blur and additive Gaussian noise.
pub struct BlurOracleFixer {
    pub ground_truth: GroundTruthFn,
    pub radius: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub fn box_blur(img: &Image, radius: usize) -> Image {
    if radius == 0 {
        return img.clone();
    }
    let r = radius as isize;
    Image::from_fn(img.width, img.height, |x, y| {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                if sx >= 0 && sy >= 0 && (sx as usize) < img.width && (sy as usize) < img.height {
                    let p = img.at(sx as usize, sy as usize);
                    for ch in 0..3 {
                        acc[ch] += p[ch];
                    }
                    n += 1.0;
                }
            }
        }
        acc.map(|v| v / n)
    })
}

fn pose_seed(seed: u64, pose: &Pose) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in pose.wxyz().iter().chain(pose.translation.iter()) {
        h = (h ^ v.to_bits()).wrapping_mul(0x1000_0000_01b3);
    }
    h
}

impl Fixer for BlurOracleFixer {
    fn name(&self) -> &str {
        "blur_oracle"
    }

    fn fix(&self, render: &Image, pose: &Pose) -> Result<Image, FixError> {
        let gt = OracleFixer {
            ground_truth: self.ground_truth.clone(),
        }
        .fix(render, pose)?;
        let mut out = box_blur(&gt, self.radius);
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(pose_seed(self.seed, pose));
            let dist = Normal::new(0.0, self.noise_sigma).map_err(|e| FixError(e.to_string()))?;
            for p in out.data.iter_mut() {
                for v in p.iter_mut() {
                    *v = (*v + dist.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }
}

/// Appearance adaptation applied to finished renders.
pub trait PostProcess: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, img: &Image) -> Image;
}

pub struct IdentityPost;

impl PostProcess for IdentityPost {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&self, img: &Image) -> Image {
        img.clone()
    }
}

/// Per-channel rank-based histogram matching to a reference style image.
pub struct HistogramMatch {
    /// Sorted reference values per channel.
    sorted: [Vec<f64>; 3],
}

impl HistogramMatch {
    pub fn new(reference: &Image) -> Self {
        let sorted = [0, 1, 2].map(|ch| {
            let mut v: Vec<f64> = reference.data.iter().map(|p| p[ch]).collect();
            v.sort_by(f64::total_cmp);
            v
        });
        Self { sorted }
    }
}

impl PostProcess for HistogramMatch {
    fn name(&self) -> &str {
        "histogram_match"
    }

    fn apply(&self, img: &Image) -> Image {
        let n = img.len();
        let mut out = img.clone();
        if n == 0 {
            return out;
        }
        for ch in 0..3 {
            let refs = &self.sorted[ch];
            if refs.is_empty() {
                continue;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| img.data[a][ch].total_cmp(&img.data[b][ch]).then(a.cmp(&b)));
            let m = refs.len();
            for (rank, &idx) in order.iter().enumerate() {
                // Center of this rank's quantile bin in the reference.
                let q = ((rank as f64 + 0.5) * m as f64 / n as f64).floor() as usize;
                out.data[idx][ch] = refs[q.min(m - 1)];
            }
        }
        out
    }
}

pub fn apply_post_process(plugin: &dyn PostProcess, img: &Image) -> Image {
    plugin.apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured() -> Image {
        Image::from_fn(16, 12, |x, y| {
            let v = ((x * 7 + y * 13) % 17) as f64 / 17.0;
            [v, (v * 0.5 + 0.2).min(1.0), 1.0 - v]
        })
        .quantized()
    }

    #[test]
    fn identity_is_bit_exact() {
        let a = textured();
        assert_eq!(apply_post_process(&IdentityPost, &a), a);
    }

    #[test]
    fn histogram_match_to_self_is_a_fixed_point() {
        let a = textured();
        let out = HistogramMatch::new(&a).apply(&a);
        for (p, q) in out.data.iter().zip(&a.data) {
            for ch in 0..3 {
                assert!((p[ch] - q[ch]).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn histogram_match_removes_brightness_shift() {
        let reference = textured();
        let shifted = reference.map(|c| c.map(|v| (v * 1.3 + 0.1).min(1.0)));
        let out = HistogramMatch::new(&reference).apply(&shifted);
        let (a, b) = (out.mean(), reference.mean());
        for ch in 0..3 {
            assert!((a[ch] - b[ch]).abs() < 2.0 / 255.0);
        }
    }

    #[test]
    fn blur_oracle_is_deterministic() {
        let gt: GroundTruthFn = Arc::new(|_p: &Pose| textured());
        let f = BlurOracleFixer {
            ground_truth: gt,
            radius: 1,
            noise_sigma: 0.02,
            seed: 3,
        };
        let pose = Pose::identity();
        let r = Image::new(16, 12);
        assert_eq!(f.fix(&r, &pose).unwrap(), f.fix(&r, &pose).unwrap());
        assert!(f.fix(&Image::new(3, 3), &pose).is_err());
    }
}
