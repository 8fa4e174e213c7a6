//! Fixed-order layering: splats in front of the road, the road in front of
//! the sky.
//!
//! `final = O_gs·I_gs + (1−O_gs)·O_road·I_road + (1−O_gs)·(1−O_road)·I_sky`

use std::path::Path;

use thiserror::Error;

use crate::img::{Image, Plane};
use crate::io::{write_pfm_gray, write_pfm_rgb, write_png, IoError};

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("layer shapes differ: {0}")]
    Shape(String),
    #[error("opacity {value} at pixel {index} lies outside [0, 1]")]
    OpacityRange { index: usize, value: f64 },
}

const OPACITY_SLACK: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub i_gs: Image,
    pub i_road: Image,
    pub i_sky: Image,
    pub o_gs: Plane,
    pub o_road: Plane,
    pub image: Image,
    pub depth_gs: Option<Plane>,
    pub depth_road: Option<Plane>,
}

/// Gradients of a scalar with respect to the five composite inputs.
#[derive(Clone, Debug)]
pub struct CompositeGrad {
    pub i_gs: Vec<[f64; 3]>,
    pub o_gs: Vec<f64>,
    pub i_road: Vec<[f64; 3]>,
    pub o_road: Vec<f64>,
    pub i_sky: Vec<[f64; 3]>,
}

/// Blend weights of the three layers; they sum to one.
#[inline]
pub fn layer_weights(o_gs: f64, o_road: f64) -> [f64; 3] {
    let rest = 1.0 - o_gs;
    [o_gs, rest * o_road, rest * (1.0 - o_road)]
}

fn check(i_gs: &Image, o_gs: &Plane, i_road: &Image, o_road: &Plane, i_sky: &Image) -> Result<(), CompositeError> {
    let shape = (i_gs.width, i_gs.height);
    let shapes = [
        ("o_gs", (o_gs.width, o_gs.height)),
        ("i_road", (i_road.width, i_road.height)),
        ("o_road", (o_road.width, o_road.height)),
        ("i_sky", (i_sky.width, i_sky.height)),
    ];
    for (name, s) in shapes {
        if s != shape {
            return Err(CompositeError::Shape(format!("{name} is {}x{}, expected {}x{}", s.0, s.1, shape.0, shape.1)));
        }
    }
    for plane in [o_gs, o_road] {
        for (index, &value) in plane.data.iter().enumerate() {
            if !(-OPACITY_SLACK..=1.0 + OPACITY_SLACK).contains(&value) {
                return Err(CompositeError::OpacityRange { index, value });
            }
        }
    }
    Ok(())
}

pub fn composite(
    i_gs: &Image,
    o_gs: &Plane,
    i_road: &Image,
    o_road: &Plane,
    i_sky: &Image,
) -> Result<RenderOutput, CompositeError> {
    check(i_gs, o_gs, i_road, o_road, i_sky)?;
    let data = (0..i_gs.len())
        .map(|k| {
            let w = layer_weights(o_gs.data[k], o_road.data[k]);
            let (a, b, c) = (i_gs.data[k], i_road.data[k], i_sky.data[k]);
            [0, 1, 2].map(|ch| w[0] * a[ch] + w[1] * b[ch] + w[2] * c[ch])
        })
        .collect();
    Ok(RenderOutput {
        i_gs: i_gs.clone(),
        i_road: i_road.clone(),
        i_sky: i_sky.clone(),
        o_gs: o_gs.clone(),
        o_road: o_road.clone(),
        image: Image {
            width: i_gs.width,
            height: i_gs.height,
            data,
        },
        depth_gs: None,
        depth_road: None,
    })
}

pub fn composite_backward(out: &RenderOutput, upstream: &[[f64; 3]]) -> CompositeGrad {
    let n = out.image.len();
    assert_eq!(upstream.len(), n);
    let mut g = CompositeGrad {
        i_gs: vec![[0.0; 3]; n],
        o_gs: vec![0.0; n],
        i_road: vec![[0.0; 3]; n],
        o_road: vec![0.0; n],
        i_sky: vec![[0.0; 3]; n],
    };
    for k in 0..n {
        let u = upstream[k];
        let (og, or) = (out.o_gs.data[k], out.o_road.data[k]);
        let w = layer_weights(og, or);
        let (a, b, c) = (out.i_gs.data[k], out.i_road.data[k], out.i_sky.data[k]);
        for ch in 0..3 {
            g.i_gs[k][ch] = w[0] * u[ch];
            g.i_road[k][ch] = w[1] * u[ch];
            g.i_sky[k][ch] = w[2] * u[ch];
            g.o_gs[k] += u[ch] * (a[ch] - or * b[ch] - (1.0 - or) * c[ch]);
            g.o_road[k] += u[ch] * (1.0 - og) * (b[ch] - c[ch]);
        }
    }
    g
}

/// Layer color divided by its coverage; zero where coverage vanishes.
pub fn unpremultiply(color: &Image, opacity: &Plane) -> Image {
    let data = color
        .data
        .iter()
        .zip(&opacity.data)
        .map(|(c, &o)| if o > 1e-12 { c.map(|v| v / o) } else { [0.0; 3] })
        .collect();
    Image {
        width: color.width,
        height: color.height,
        data,
    }
}

/// Composite from premultiplied layer colors `C = O·I`:
/// `final = C_gs + (1−O_gs)·(C_road + (1−O_road)·I_sky)`. Algebraically the
/// same blend, but well conditioned where a layer's coverage is tiny.
pub fn composite_premultiplied(c_gs: &[[f64; 3]], o_gs: &[f64], c_road: &[[f64; 3]], o_road: &[f64], i_sky: &[[f64; 3]]) -> Vec<[f64; 3]> {
    (0..c_gs.len())
        .map(|k| {
            let (g, r, s) = (c_gs[k], c_road[k], i_sky[k]);
            let (og, or) = (o_gs[k], o_road[k]);
            [0, 1, 2].map(|ch| g[ch] + (1.0 - og) * (r[ch] + (1.0 - or) * s[ch]))
        })
        .collect()
}

/// Gradients of [`composite_premultiplied`], in the same field layout as
/// [`CompositeGrad`] but with `i_gs`/`i_road` holding premultiplied-color
/// gradients.
pub fn composite_premultiplied_backward(
    c_road: &[[f64; 3]],
    o_gs: &[f64],
    o_road: &[f64],
    i_sky: &[[f64; 3]],
    upstream: &[[f64; 3]],
) -> CompositeGrad {
    let n = upstream.len();
    let mut g = CompositeGrad {
        i_gs: upstream.to_vec(),
        o_gs: vec![0.0; n],
        i_road: vec![[0.0; 3]; n],
        o_road: vec![0.0; n],
        i_sky: vec![[0.0; 3]; n],
    };
    for k in 0..n {
        let u = upstream[k];
        let (og, or) = (o_gs[k], o_road[k]);
        for ch in 0..3 {
            g.o_gs[k] -= u[ch] * (c_road[k][ch] + (1.0 - or) * i_sky[k][ch]);
            g.i_road[k][ch] = (1.0 - og) * u[ch];
            g.o_road[k] -= (1.0 - og) * u[ch] * i_sky[k][ch];
            g.i_sky[k][ch] = (1.0 - og) * (1.0 - or) * u[ch];
        }
    }
    g
}

impl RenderOutput {
    /// Writes `<stem>_{gs,road,sky,ogs,oroad,final}` as PNG and PFM.
    pub fn dump_layers(&self, dir: &Path, stem: &str) -> Result<(), IoError> {
        std::fs::create_dir_all(dir).map_err(crate::io::fs_err(dir))?;
        for (suffix, img) in [("gs", &self.i_gs), ("road", &self.i_road), ("sky", &self.i_sky), ("final", &self.image)] {
            write_png(&dir.join(format!("{stem}_{suffix}.png")), img)?;
            write_pfm_rgb(&dir.join(format!("{stem}_{suffix}.pfm")), img)?;
        }
        for (suffix, plane) in [("ogs", &self.o_gs), ("oroad", &self.o_road)] {
            write_png(&dir.join(format!("{stem}_{suffix}.png")), &plane.to_image())?;
            write_pfm_gray(&dir.join(format!("{stem}_{suffix}.pfm")), plane)?;
        }
        Ok(())
    }
}
