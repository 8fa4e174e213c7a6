use serde::{Deserialize, Serialize};

/// Axis-aligned horizontal extent in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent2 {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Extent2 {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        assert!(x1 > x0 && y1 > y0, "empty extent");
        Self { x0, x1, y0, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn depth(&self) -> f64 {
        self.y1 - self.y0
    }
}

/// One regular level: `(nx + 1) × (ny + 1)` vertices, each with `channels`
/// features, stored row-major (y outer).
#[derive(Clone, Debug, PartialEq)]
pub struct GridLevel {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl GridLevel {
    pub fn vertex_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }
}

/// Bilinear lookup record for one level: first-vertex offsets and weights of
/// the four corners `(i, j), (i+1, j), (i, j+1), (i+1, j+1)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Corners {
    pub vertex: [usize; 4],
    pub weight: [f64; 4],
}

/// Multi-level 2D feature grid followed by an affine head.
///
/// The head input is the concatenation of every level's interpolated
/// features plus `extra_inputs` caller-supplied values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    pub extent: Extent2,
    pub channels: usize,
    pub levels: Vec<GridLevel>,
    pub extra_inputs: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Cells per level: geometric progression from `base` to `finest` cells along
/// the longer side; the shorter side keeps cells roughly square.
pub fn level_resolutions(extent: &Extent2, levels: usize, base: usize, finest: usize) -> Vec<(usize, usize)> {
    let long = extent.width().max(extent.depth());
    (0..levels)
        .map(|l| {
            let n = if levels == 1 {
                finest as f64
            } else {
                base as f64 * (finest as f64 / base as f64).powf(l as f64 / (levels - 1) as f64)
            };
            let cell = long / n.round().max(1.0);
            (
                (extent.width() / cell).round().max(1.0) as usize,
                (extent.depth() / cell).round().max(1.0) as usize,
            )
        })
        .collect()
}

impl Grid2D {
    pub fn new(
        extent: Extent2,
        resolutions: &[(usize, usize)],
        channels: usize,
        extra_inputs: usize,
        out_dim: usize,
    ) -> Self {
        let levels: Vec<GridLevel> = resolutions
            .iter()
            .map(|&(nx, ny)| GridLevel {
                nx,
                ny,
                data: vec![0.0; (nx + 1) * (ny + 1) * channels],
            })
            .collect();
        let in_dim = levels.len() * channels + extra_inputs;
        Self {
            extent,
            channels,
            levels,
            extra_inputs,
            out_dim,
            head_weight: vec![0.0; out_dim * in_dim],
            head_bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.levels.len() * self.channels + self.extra_inputs
    }

    /// Same shape, all zeros; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.levels.iter_mut().for_each(|l| l.data.fill(0.0));
        g.head_weight.fill(0.0);
        g.head_bias.fill(0.0);
        g
    }

    pub fn param_count(&self) -> usize {
        self.levels.iter().map(|l| l.data.len()).sum::<usize>() + self.head_weight.len() + self.head_bias.len()
    }

    /// All parameter arrays: levels, head weight, head bias.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.levels.iter().map(|l| l.data.as_slice()).collect();
        v.push(&self.head_weight);
        v.push(&self.head_bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.levels.iter_mut().map(|l| l.data.as_mut_slice()).collect();
        v.push(&mut self.head_weight);
        v.push(&mut self.head_bias);
        v
    }

    /// Adds `other` (same shape) into `self`.
    pub fn accumulate(&mut self, other: &Grid2D) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Level-local corner lookup; queries outside the extent clamp to the border.
    #[inline]
    pub fn corners(&self, level: usize, x: f64, y: f64) -> Corners {
        let l = &self.levels[level];
        let e = &self.extent;
        let u = ((x - e.x0) / (e.x1 - e.x0)).clamp(0.0, 1.0) * l.nx as f64;
        let v = ((y - e.y0) / (e.y1 - e.y0)).clamp(0.0, 1.0) * l.ny as f64;
        let i = (u.floor() as usize).min(l.nx - 1);
        let j = (v.floor() as usize).min(l.ny - 1);
        let fu = u - i as f64;
        let fv = v - j as f64;
        let row = l.nx + 1;
        let v00 = j * row + i;
        Corners {
            vertex: [v00, v00 + 1, v00 + row, v00 + row + 1],
            weight: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        }
    }

    /// Interpolated features of every level (concatenated) followed by `extra`.
    pub fn features(&self, x: f64, y: f64, extra: &[f64], feats: &mut Vec<f64>) {
        debug_assert_eq!(extra.len(), self.extra_inputs);
        feats.clear();
        let c = self.channels;
        for (li, l) in self.levels.iter().enumerate() {
            let k = self.corners(li, x, y);
            for ch in 0..c {
                let mut acc = 0.0;
                for q in 0..4 {
                    acc += k.weight[q] * l.data[k.vertex[q] * c + ch];
                }
                feats.push(acc);
            }
        }
        feats.extend_from_slice(extra);
    }

    pub fn head(&self, feats: &[f64], out: &mut [f64]) {
        let n = feats.len();
        for (o, ov) in out.iter_mut().enumerate() {
            let row = &self.head_weight[o * n..(o + 1) * n];
            *ov = self.head_bias[o] + row.iter().zip(feats).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Scalar query for single-output grids without extra inputs.
    #[inline]
    pub fn eval_scalar(&self, x: f64, y: f64) -> f64 {
        debug_assert!(self.out_dim == 1 && self.extra_inputs == 0);
        let c = self.channels;
        let mut acc = self.head_bias[0];
        for (li, l) in self.levels.iter().enumerate() {
            let k = self.corners(li, x, y);
            for ch in 0..c {
                let mut f = 0.0;
                for q in 0..4 {
                    f += k.weight[q] * l.data[k.vertex[q] * c + ch];
                }
                acc += self.head_weight[li * c + ch] * f;
            }
        }
        acc
    }

    pub fn eval(&self, x: f64, y: f64, extra: &[f64]) -> Vec<f64> {
        let mut feats = Vec::new();
        self.features(x, y, extra, &mut feats);
        let mut out = vec![0.0; self.out_dim];
        self.head(&feats, &mut out);
        out
    }

    /// Accumulates into `grad` the gradient of a scalar whose derivative
    /// w.r.t. this grid's output at `(x, y)` is `d_out`. `feats` are the
    /// head inputs from [`Grid2D::features`] at the same point.
    pub fn backward(&self, x: f64, y: f64, feats: &[f64], d_out: &[f64], grad: &mut Grid2D) {
        let n = feats.len();
        let c = self.channels;
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.head_bias[o] += g;
            let row = &mut grad.head_weight[o * n..(o + 1) * n];
            for (r, f) in row.iter_mut().zip(feats) {
                *r += g * f;
            }
        }
        for li in 0..self.levels.len() {
            let k = self.corners(li, x, y);
            for ch in 0..c {
                let col = li * c + ch;
                let mut g_feat = 0.0;
                for (o, &g) in d_out.iter().enumerate() {
                    g_feat += g * self.head_weight[o * n + col];
                }
                if g_feat == 0.0 {
                    continue;
                }
                let data = &mut grad.levels[li].data;
                for q in 0..4 {
                    data[k.vertex[q] * c + ch] += g_feat * k.weight[q];
                }
            }
        }
    }

    /// Scalar-output backward that needs no feature vector.
    #[inline]
    pub fn backward_scalar(&self, x: f64, y: f64, d_out: f64, grad: &mut Grid2D) {
        if d_out == 0.0 {
            return;
        }
        let c = self.channels;
        grad.head_bias[0] += d_out;
        for (li, l) in self.levels.iter().enumerate() {
            let k = self.corners(li, x, y);
            for ch in 0..c {
                let col = li * c + ch;
                let mut f = 0.0;
                for q in 0..4 {
                    f += k.weight[q] * l.data[k.vertex[q] * c + ch];
                }
                grad.head_weight[col] += d_out * f;
                let gf = d_out * self.head_weight[col];
                let data = &mut grad.levels[li].data;
                for q in 0..4 {
                    data[k.vertex[q] * c + ch] += gf * k.weight[q];
                }
            }
        }
    }

    /// Whether `other` has the same extent and level layout.
    pub fn same_layout(&self, other: &Grid2D) -> bool {
        self.extent == other.extent
            && self.channels == other.channels
            && self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| a.nx == b.nx && a.ny == b.ny)
    }

    /// [`Grid2D::eval_scalar`] of two single-channel grids with the same
    /// layout, sharing the corner lookups.
    #[inline]
    pub fn eval_scalar_pair(a: &Grid2D, b: &Grid2D, x: f64, y: f64) -> (f64, f64) {
        debug_assert!(a.channels == 1 && a.same_layout(b));
        let (mut va, mut vb) = (a.head_bias[0], b.head_bias[0]);
        for li in 0..a.levels.len() {
            let k = a.corners(li, x, y);
            let (da, db) = (&a.levels[li].data, &b.levels[li].data);
            let (mut fa, mut fb) = (0.0, 0.0);
            for q in 0..4 {
                fa += k.weight[q] * da[k.vertex[q]];
                fb += k.weight[q] * db[k.vertex[q]];
            }
            va += a.head_weight[li] * fa;
            vb += b.head_weight[li] * fb;
        }
        (va, vb)
    }

    /// [`Grid2D::backward_scalar`] of two single-channel grids with the same
    /// layout, sharing the corner lookups.
    #[inline]
    pub fn backward_scalar_pair(
        a: &Grid2D,
        b: &Grid2D,
        x: f64,
        y: f64,
        (da_out, db_out): (f64, f64),
        ga: &mut Grid2D,
        gb: &mut Grid2D,
    ) {
        debug_assert!(a.channels == 1 && a.same_layout(b));
        ga.head_bias[0] += da_out;
        gb.head_bias[0] += db_out;
        for li in 0..a.levels.len() {
            let k = a.corners(li, x, y);
            let (da, db) = (&a.levels[li].data, &b.levels[li].data);
            let (mut fa, mut fb) = (0.0, 0.0);
            for q in 0..4 {
                fa += k.weight[q] * da[k.vertex[q]];
                fb += k.weight[q] * db[k.vertex[q]];
            }
            ga.head_weight[li] += da_out * fa;
            gb.head_weight[li] += db_out * fb;
            let (wa, wb) = (da_out * a.head_weight[li], db_out * b.head_weight[li]);
            let (ta, tb) = (&mut ga.levels[li].data, &mut gb.levels[li].data);
            for q in 0..4 {
                ta[k.vertex[q]] += wa * k.weight[q];
                tb[k.vertex[q]] += wb * k.weight[q];
            }
        }
    }

    /// Conservative output bounds over the whole extent (scalar grids).
    pub fn scalar_bounds(&self) -> (f64, f64) {
        let c = self.channels;
        let mut lo = self.head_bias[0];
        let mut hi = self.head_bias[0];
        for (li, l) in self.levels.iter().enumerate() {
            for ch in 0..c {
                let w = self.head_weight[li * c + ch];
                let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in 0..l.vertex_count() {
                    let t = w * l.data[v * c + ch];
                    mn = mn.min(t);
                    mx = mx.max(t);
                }
                lo += mn;
                hi += mx;
            }
        }
        (lo, hi)
    }

    /// Vertex position of level `li`, vertex `(i, j)`.
    pub fn vertex_position(&self, li: usize, i: usize, j: usize) -> (f64, f64) {
        let l = &self.levels[li];
        let e = &self.extent;
        (
            e.x0 + e.width() * i as f64 / l.nx as f64,
            e.y0 + e.depth() * j as f64 / l.ny as f64,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid2D {
        let e = Extent2::new(-2.0, 2.0, -1.0, 1.0);
        let mut g = Grid2D::new(e, &[(4, 2), (8, 4)], 2, 1, 2);
        let mut s = 0.1;
        for p in g.params_mut() {
            for v in p.iter_mut() {
                s = (s * 7.3 + 0.37) % 1.0;
                *v = s - 0.5;
            }
        }
        g
    }

    #[test]
    fn exact_at_vertices_and_clamped_outside() {
        let g = grid();
        let (x, y) = g.vertex_position(1, 3, 2);
        let k = g.corners(1, x, y);
        let hit = k.weight.iter().position(|&w| (w - 1.0).abs() < 1e-12).unwrap();
        assert_eq!(k.vertex[hit], 2 * 9 + 3);
        let inside = g.eval(2.0, 1.0, &[0.3]);
        let outside = g.eval(5.0, 9.0, &[0.3]);
        assert_eq!(inside, outside);
    }

    #[test]
    fn continuous_across_cell_boundary() {
        let g = grid();
        let a = g.eval(0.5 - 1e-10, 0.1, &[0.0]);
        let b = g.eval(0.5 + 1e-10, 0.1, &[0.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = grid();
        let (x, y, extra) = (0.37, -0.41, [0.8]);
        let d_out = [0.7, -1.3];
        let mut feats = Vec::new();
        g.features(x, y, &extra, &mut feats);
        let mut grad = g.zeros_like();
        g.backward(x, y, &feats, &d_out, &mut grad);
        let f = |g: &Grid2D| {
            let o = g.eval(x, y, &extra);
            o[0] * d_out[0] + o[1] * d_out[1]
        };
        let h = 1e-6;
        let gp = grad.params().into_iter().flatten().copied().collect::<Vec<_>>();
        let n = g.param_count();
        for k in 0..n {
            let bump = |delta: f64| {
                let mut c = g.clone();
                let mut idx = k;
                for p in c.params_mut() {
                    if idx < p.len() {
                        p[idx] += delta;
                        break;
                    }
                    idx -= p.len();
                }
                f(&c)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - gp[k]).abs() < 1e-8, "param {k}: {fd} vs {}", gp[k]);
        }
    }

    #[test]
    fn scalar_paths_agree_with_general_paths() {
        let e = Extent2::new(0.0, 4.0, 0.0, 2.0);
        let mut g = Grid2D::new(e, &[(2, 1), (4, 2)], 1, 0, 1);
        for (i, p) in g.params_mut().into_iter().enumerate() {
            for (j, v) in p.iter_mut().enumerate() {
                *v = ((i * 31 + j * 17) % 11) as f64 / 11.0 - 0.4;
            }
        }
        let (x, y) = (1.3, 0.7);
        assert!((g.eval_scalar(x, y) - g.eval(x, y, &[])[0]).abs() < 1e-14);
        let mut a = g.zeros_like();
        let mut b = g.zeros_like();
        g.backward_scalar(x, y, 0.9, &mut a);
        let mut feats = Vec::new();
        g.features(x, y, &[], &mut feats);
        g.backward(x, y, &feats, &[0.9], &mut b);
        assert_eq!(a, b);
        let (lo, hi) = g.scalar_bounds();
        for k in 0..50 {
            let v = g.eval_scalar(k as f64 * 0.08, (k % 7) as f64 * 0.3);
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn resolutions_follow_extent() {
        let r = level_resolutions(&Extent2::new(0.0, 80.0, -10.0, 10.0), 4, 16, 128);
        assert_eq!(r[0], (16, 4));
        assert_eq!(r[3], (128, 32));
    }
}
