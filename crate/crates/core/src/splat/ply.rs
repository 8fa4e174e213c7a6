use std::path::Path;

use super::{Gaussian3D, PARAM_COUNT};
use crate::io::{IoError, PlyTable, PlyType};

fn column_names(with_sh: bool) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    names.extend((0..3).map(|i| format!("log_scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names.push("logit_opacity".into());
    names.extend((0..3).map(|i| format!("color_{i}")));
    if with_sh {
        names.extend((0..9).map(|i| format!("sh_{i}")));
    }
    names
}

/// Writes doubles so that a save/load cycle is exact. SH columns are only
/// emitted when some Gaussian has non-zero directional color.
pub fn write_gaussians_ply(path: &Path, gaussians: &[Gaussian3D]) -> Result<(), IoError> {
    let with_sh = gaussians.iter().any(|g| g.sh1.iter().flatten().any(|&v| v != 0.0));
    let names = column_names(with_sh);
    let rows = gaussians
        .iter()
        .map(|g| g.to_params()[..names.len()].to_vec())
        .collect();
    PlyTable {
        columns: names.into_iter().map(|n| (n, PlyType::Double)).collect(),
        rows,
    }
    .write(path)
}

pub fn read_gaussians_ply(path: &Path) -> Result<Vec<Gaussian3D>, IoError> {
    let table = PlyTable::read(path)?;
    let names = column_names(true);
    let mut idx = Vec::with_capacity(PARAM_COUNT);
    for (i, n) in names.iter().enumerate() {
        match table.column(n) {
            Some(c) => idx.push(Some(c)),
            None if i >= 14 => idx.push(None),
            None => return Err(IoError::Format(format!("gaussian PLY lacks property {n}"))),
        }
    }
    Ok(table
        .rows
        .iter()
        .map(|row| {
            let mut p = [0.0; PARAM_COUNT];
            for (dst, src) in p.iter_mut().zip(&idx) {
                if let Some(c) = src {
                    *dst = row[*c];
                }
            }
            Gaussian3D::from_params(&p)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn round_trip_with_and_without_sh() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let mut gs = vec![
            Gaussian3D::isotropic(Vec3::new(1.0, 2.0, 3.0), 0.25, 0.1, [0.1, 0.2, 0.3]),
            Gaussian3D::isotropic(Vec3::new(-1.0, 0.5, 0.0), 0.5, 0.9, [0.9, 0.8, 0.7]),
        ];
        write_gaussians_ply(&path, &gs).unwrap();
        assert_eq!(read_gaussians_ply(&path).unwrap(), gs);
        gs[1].sh1[2][0] = -0.3;
        write_gaussians_ply(&path, &gs).unwrap();
        assert_eq!(read_gaussians_ply(&path).unwrap(), gs);
    }
}
