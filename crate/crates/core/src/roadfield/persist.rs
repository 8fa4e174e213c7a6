//! `RDF1` container: little-endian header followed by `f32` parameter
//! arrays, plus a plain-text manifest mirroring the header.

use std::fmt::Write as _;
use std::path::Path;

use super::grid::{Extent2, Grid2D, GridLevel};
use super::{RoadError, RoadField};
use crate::io::fs_err;

const MAGIC: &[u8; 4] = b"RDF1";
const GRID_NAMES: [&str; 3] = ["elevation", "slope", "color"];

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], RoadError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(RoadError::Format("truncated file".into()));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, RoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64, RoadError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, out: &mut [f64]) -> Result<(), RoadError> {
        let raw = self.take(out.len() * 4)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        Ok(())
    }
}

fn grid_header(buf: &mut Vec<u8>, g: &Grid2D) {
    for v in [g.extent.x0, g.extent.x1, g.extent.y0, g.extent.y1] {
        put_f64(buf, v);
    }
    put_u32(buf, g.channels);
    put_u32(buf, g.extra_inputs);
    put_u32(buf, g.out_dim);
    put_u32(buf, g.levels.len());
    for l in &g.levels {
        put_u32(buf, l.nx);
        put_u32(buf, l.ny);
    }
}

fn read_grid_header(r: &mut Reader) -> Result<Grid2D, RoadError> {
    let (x0, x1, y0, y1) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    if !(x1 > x0 && y1 > y0) {
        return Err(RoadError::Format("empty grid extent".into()));
    }
    let (channels, extra, out, nl) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if nl == 0 || nl > 64 || channels == 0 || out == 0 {
        return Err(RoadError::Format("bad grid shape".into()));
    }
    let mut res = Vec::with_capacity(nl);
    for _ in 0..nl {
        let (nx, ny) = (r.u32()?, r.u32()?);
        if nx == 0 || ny == 0 || nx > 1 << 16 || ny > 1 << 16 {
            return Err(RoadError::Format("bad level resolution".into()));
        }
        res.push((nx, ny));
    }
    Ok(Grid2D::new(Extent2 { x0, x1, y0, y1 }, &res, channels, extra, out))
}

fn manifest(field: &RoadField) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "format = \"RDF1\"");
    let _ = writeln!(m, "log_s = {}", field.log_s);
    let _ = writeln!(m, "margin = {}", field.margin);
    for (name, g) in GRID_NAMES.iter().zip([&field.elevation, &field.slope, &field.color]) {
        let e = g.extent;
        let _ = writeln!(m, "\n[{name}]");
        let _ = writeln!(m, "extent = [{}, {}, {}, {}]", e.x0, e.x1, e.y0, e.y1);
        let _ = writeln!(m, "channels = {}", g.channels);
        let _ = writeln!(m, "extra_inputs = {}", g.extra_inputs);
        let _ = writeln!(m, "out_dim = {}", g.out_dim);
        let res: Vec<String> = g.levels.iter().map(|l: &GridLevel| format!("[{}, {}]", l.nx, l.ny)).collect();
        let _ = writeln!(m, "levels = [{}]", res.join(", "));
    }
    m
}

/// Writes `path` and a text manifest next to it (`<path>.toml`).
pub fn write_road_field(path: &Path, field: &RoadField) -> Result<(), RoadError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_f64(&mut buf, field.log_s);
    put_f64(&mut buf, field.margin);
    let grids = [&field.elevation, &field.slope, &field.color];
    for g in grids {
        grid_header(&mut buf, g);
    }
    for g in grids {
        for p in g.params() {
            for v in p {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, &buf).map_err(fs_err(path))?;
    let mpath = manifest_path(path);
    std::fs::write(&mpath, manifest(field)).map_err(fs_err(&mpath))?;
    Ok(())
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

pub fn read_road_field(path: &Path) -> Result<RoadField, RoadError> {
    let bytes = std::fs::read(path).map_err(|e| RoadError::Io(fs_err(path)(e)))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(RoadError::Format("not an RDF1 file".into()));
    }
    let log_s = r.f64()?;
    let margin = r.f64()?;
    let mut grids = Vec::with_capacity(3);
    for _ in 0..3 {
        grids.push(read_grid_header(&mut r)?);
    }
    let expected: usize = grids.iter().map(|g| g.param_count()).sum::<usize>() * 4 + r.pos;
    if expected != bytes.len() {
        return Err(RoadError::Format(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    for g in grids.iter_mut() {
        for p in g.params_mut() {
            r.f32s(p)?;
        }
    }
    let color = grids.pop().unwrap();
    let slope = grids.pop().unwrap();
    let elevation = grids.pop().unwrap();
    if elevation.out_dim != 1 || slope.out_dim != 1 || color.out_dim != 3 {
        return Err(RoadError::Format("unexpected head widths".into()));
    }
    Ok(RoadField {
        elevation,
        slope,
        color,
        log_s,
        margin,
    })
}
