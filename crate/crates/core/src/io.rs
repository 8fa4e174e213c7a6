//! File formats: TOML configs, 8-bit PNG, PFM float images, and a small PLY
//! table reader/writer.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::img::{Image, Plane};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("toml: {0}")]
    Toml(String),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

pub(crate) fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(fs_err(path))?;
    toml::from_str(&text).map_err(|e| IoError::Toml(format!("{}: {e}", path.display())))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = toml::to_string_pretty(value).map_err(|e| IoError::Toml(e.to_string()))?;
    std::fs::write(path, text).map_err(fs_err(path))
}

pub fn write_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (dst, src) in buf.pixels_mut().zip(&img.data) {
        *dst = image::Rgb(src.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    buf.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image, IoError> {
    let buf = image::open(path)?.to_rgb8();
    let (w, h) = buf.dimensions();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        data: buf
            .pixels()
            .map(|p| p.0.map(|v| v as f64 / 255.0))
            .collect(),
    })
}

fn write_pfm_raw(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<(), IoError> {
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(out, "{tag}\n{width} {height}\n-1.0\n").unwrap();
    // PFM stores rows bottom to top.
    for y in (0..height).rev() {
        let row = &data[y * width * channels..(y + 1) * width * channels];
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(fs_err(path))
}

fn read_pfm_raw(path: &Path) -> Result<(usize, usize, usize, Vec<f64>), IoError> {
    let file = std::fs::File::open(path).map_err(fs_err(path))?;
    let mut rd = BufReader::new(file);
    let mut header = Vec::new();
    while header.len() < 3 {
        let mut line = String::new();
        if rd.read_line(&mut line).map_err(fs_err(path))? == 0 {
            return Err(IoError::Format("truncated PFM header".into()));
        }
        header.extend(line.split_whitespace().map(str::to_string));
    }
    let channels = match header[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(IoError::Format(format!("bad PFM tag {t}"))),
    };
    let parse = |s: &str| s.parse::<f64>().map_err(|_| IoError::Format(format!("bad PFM header field {s}")));
    let width = parse(&header[1])? as usize;
    let height = parse(&header[2])? as usize;
    let mut scale_line = String::new();
    let scale = if header.len() > 3 {
        parse(&header[3])?
    } else {
        rd.read_line(&mut scale_line).map_err(fs_err(path))?;
        parse(scale_line.trim())?
    };
    let little = scale < 0.0;
    let mut bytes = Vec::new();
    rd.read_to_end(&mut bytes).map_err(fs_err(path))?;
    let n = width * height * channels;
    if bytes.len() < n * 4 {
        return Err(IoError::Format("truncated PFM payload".into()));
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in bytes[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let row = i / (width * channels);
        let rest = i % (width * channels);
        data[(height - 1 - row) * width * channels + rest] = v as f64;
    }
    Ok((width, height, channels, data))
}

pub fn write_pfm_rgb(path: &Path, img: &Image) -> Result<(), IoError> {
    let flat: Vec<f64> = img.data.iter().flat_map(|p| p.iter().copied()).collect();
    write_pfm_raw(path, img.width, img.height, 3, &flat)
}

pub fn write_pfm_gray(path: &Path, plane: &Plane) -> Result<(), IoError> {
    write_pfm_raw(path, plane.width, plane.height, 1, &plane.data)
}

pub fn read_pfm_rgb(path: &Path) -> Result<Image, IoError> {
    let (w, h, c, data) = read_pfm_raw(path)?;
    if c != 3 {
        return Err(IoError::Format("expected a color PFM".into()));
    }
    Ok(Image {
        width: w,
        height: h,
        data: data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
    })
}

pub fn read_pfm_gray(path: &Path) -> Result<Plane, IoError> {
    let (w, h, c, data) = read_pfm_raw(path)?;
    if c != 1 {
        return Err(IoError::Format("expected a grayscale PFM".into()));
    }
    Ok(Plane { width: w, height: h, data })
}

/// PLY scalar property types we emit and accept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyType {
    Double,
    Float,
    UChar,
    Int,
}

impl PlyType {
    fn name(self) -> &'static str {
        match self {
            PlyType::Double => "double",
            PlyType::Float => "float",
            PlyType::UChar => "uchar",
            PlyType::Int => "int",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "double" | "float64" => PlyType::Double,
            "float" | "float32" => PlyType::Float,
            "uchar" | "uint8" => PlyType::UChar,
            "int" | "int32" => PlyType::Int,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::Double => 8,
            PlyType::Float | PlyType::Int => 4,
            PlyType::UChar => 1,
        }
    }
}

/// A single-element ("vertex") PLY table with numeric columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyTable {
    pub columns: Vec<(String, PlyType)>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let mut out = Vec::new();
        writeln!(out, "ply\nformat binary_little_endian 1.0").unwrap();
        writeln!(out, "element vertex {}", self.rows.len()).unwrap();
        for (name, ty) in &self.columns {
            writeln!(out, "property {} {}", ty.name(), name).unwrap();
        }
        writeln!(out, "end_header").unwrap();
        for row in &self.rows {
            for ((_, ty), v) in self.columns.iter().zip(row) {
                match ty {
                    PlyType::Double => out.extend_from_slice(&v.to_le_bytes()),
                    PlyType::Float => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                    PlyType::UChar => out.push(v.round().clamp(0.0, 255.0) as u8),
                    PlyType::Int => out.extend_from_slice(&(*v as i32).to_le_bytes()),
                }
            }
        }
        std::fs::write(path, out).map_err(fs_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let bytes = std::fs::read(path).map_err(fs_err(path))?;
        let end = b"end_header\n";
        let hdr_end = bytes
            .windows(end.len())
            .position(|w| w == end)
            .ok_or_else(|| IoError::Format("PLY header not terminated".into()))?;
        let header = std::str::from_utf8(&bytes[..hdr_end])
            .map_err(|_| IoError::Format("PLY header not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some("ply") {
            return Err(IoError::Format("missing ply magic".into()));
        }
        let mut binary = true;
        let mut count = 0usize;
        let mut columns = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["format", "binary_little_endian", _] => binary = true,
                ["format", "ascii", _] => binary = false,
                ["format", other, _] => {
                    return Err(IoError::Format(format!("unsupported PLY format {other}")))
                }
                ["element", "vertex", n] => {
                    count = n
                        .parse()
                        .map_err(|_| IoError::Format("bad vertex count".into()))?
                }
                ["element", other, _] => {
                    return Err(IoError::Format(format!("unsupported PLY element {other}")))
                }
                ["property", ty, name] => {
                    let ty = PlyType::parse(ty)
                        .ok_or_else(|| IoError::Format(format!("unsupported property type {ty}")))?;
                    columns.push((name.to_string(), ty));
                }
                _ => {}
            }
        }
        let body = &bytes[hdr_end + end.len()..];
        let mut rows = Vec::with_capacity(count);
        if binary {
            let stride: usize = columns.iter().map(|(_, t)| t.size()).sum();
            if body.len() < stride * count {
                return Err(IoError::Format("truncated PLY body".into()));
            }
            for r in 0..count {
                let mut off = r * stride;
                let mut row = Vec::with_capacity(columns.len());
                for (_, ty) in &columns {
                    let b = &body[off..off + ty.size()];
                    row.push(match ty {
                        PlyType::Double => f64::from_le_bytes(b.try_into().unwrap()),
                        PlyType::Float => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                        PlyType::UChar => b[0] as f64,
                        PlyType::Int => i32::from_le_bytes(b.try_into().unwrap()) as f64,
                    });
                    off += ty.size();
                }
                rows.push(row);
            }
        } else {
            let text = std::str::from_utf8(body).map_err(|_| IoError::Format("PLY body not UTF-8".into()))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()).take(count) {
                let row: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
                let row = row.map_err(|_| IoError::Format("bad ascii PLY row".into()))?;
                if row.len() != columns.len() {
                    return Err(IoError::Format("ascii PLY row width mismatch".into()));
                }
                rows.push(row);
            }
            if rows.len() != count {
                return Err(IoError::Format("truncated ascii PLY body".into()));
            }
        }
        Ok(Self { columns, rows })
    }
}
