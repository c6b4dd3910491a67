//! Cubic occupancy grids, binary or probabilistic, with their on-disk
//! formats.
//!
//! Values are stored row-major with x fastest, then y, then z:
//! `idx = x + g·y + g²·z`. Binary grids serialize as magic `VG01`, a 32-bit
//! little-endian edge length, then g³ bytes of 0/1. Probabilistic grids use
//! magic `VGP1` with 64-bit little-endian floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, VoltError};

const MAGIC_BINARY: &[u8; 4] = b"VG01";
const MAGIC_PROB: &[u8; 4] = b"VGP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Binary,
    Probabilistic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    g: usize,
    kind: GridKind,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new_binary(g: usize, values: Vec<f64>) -> Result<Self> {
        Self::validate_len(g, values.len())?;
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(VoltError::data("binary grid values must be 0 or 1"));
        }
        Ok(VoxelGrid {
            g,
            kind: GridKind::Binary,
            values,
        })
    }

    pub fn new_probabilistic(g: usize, values: Vec<f64>) -> Result<Self> {
        Self::validate_len(g, values.len())?;
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(VoltError::data("probabilistic grid values must lie in [0, 1]"));
        }
        Ok(VoxelGrid {
            g,
            kind: GridKind::Probabilistic,
            values,
        })
    }

    pub fn empty_binary(g: usize) -> Self {
        VoxelGrid {
            g,
            kind: GridKind::Binary,
            values: vec![0.0; g * g * g],
        }
    }

    fn validate_len(g: usize, len: usize) -> Result<()> {
        if g == 0 {
            return Err(VoltError::data("grid edge length must be positive"));
        }
        if len != g * g * g {
            return Err(VoltError::shape(format!(
                "grid of edge {g} needs {} values, got {len}",
                g * g * g
            )));
        }
        Ok(())
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.g * (y + self.g * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.idx(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.idx(x, y, z);
        self.values[i] = v;
    }

    pub fn occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z) != 0.0
    }

    pub fn count_occupied(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Binarize at threshold `t` (strictly greater).
    pub fn threshold(&self, t: f64) -> Result<VoxelGrid> {
        if !(0.0 < t && t < 1.0) {
            return Err(VoltError::config(format!(
                "voxelization threshold must be in (0,1), got {t}"
            )));
        }
        Ok(VoxelGrid {
            g: self.g,
            kind: GridKind::Binary,
            values: self.values.iter().map(|&v| f64::from(v > t)).collect(),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        match self.kind {
            GridKind::Binary => {
                w.write_all(MAGIC_BINARY)?;
                w.write_all(&(self.g as u32).to_le_bytes())?;
                let bytes: Vec<u8> = self.values.iter().map(|&v| (v != 0.0) as u8).collect();
                w.write_all(&bytes)?;
            }
            GridKind::Probabilistic => {
                w.write_all(MAGIC_PROB)?;
                w.write_all(&(self.g as u32).to_le_bytes())?;
                for v in &self.values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<VoxelGrid> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let mut g_bytes = [0u8; 4];
        r.read_exact(&mut g_bytes)?;
        let g = u32::from_le_bytes(g_bytes) as usize;
        if g == 0 || g > 1024 {
            return Err(VoltError::data(format!("implausible grid edge {g}")));
        }
        let n = g * g * g;
        match &magic {
            m if m == MAGIC_BINARY => {
                let mut bytes = vec![0u8; n];
                r.read_exact(&mut bytes)?;
                let values: Vec<f64> = bytes
                    .iter()
                    .map(|&b| match b {
                        0 => Ok(0.0),
                        1 => Ok(1.0),
                        other => Err(VoltError::data(format!(
                            "binary grid byte must be 0/1, got {other}"
                        ))),
                    })
                    .collect::<Result<_>>()?;
                Ok(VoxelGrid {
                    g,
                    kind: GridKind::Binary,
                    values,
                })
            }
            m if m == MAGIC_PROB => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                let values: Vec<f64> = buf
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                VoxelGrid::new_probabilistic(g, values)
            }
            _ => Err(VoltError::data("unknown voxel grid magic")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<VoxelGrid> {
        let mut r = BufReader::new(File::open(path)?);
        VoxelGrid::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_x_fastest() {
        let mut g = VoxelGrid::empty_binary(4);
        g.set(1, 0, 0, 1.0);
        g.set(0, 1, 0, 1.0);
        g.set(0, 0, 1, 1.0);
        assert_eq!(g.values()[1], 1.0);
        assert_eq!(g.values()[4], 1.0);
        assert_eq!(g.values()[16], 1.0);
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let mut grid = VoxelGrid::empty_binary(5);
        grid.set(2, 3, 4, 1.0);
        grid.set(0, 0, 0, 1.0);
        let mut buf = Vec::new();
        grid.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VG01");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 5);
        let back = VoxelGrid::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn probabilistic_roundtrip_is_bit_exact() {
        let values: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let grid = VoxelGrid::new_probabilistic(2, values).unwrap();
        let mut buf = Vec::new();
        grid.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VGP1");
        let back = VoxelGrid::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.values(), grid.values());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(VoxelGrid::new_binary(2, vec![0.5; 8]).is_err());
        assert!(VoxelGrid::new_probabilistic(2, vec![1.5; 8]).is_err());
        assert!(VoxelGrid::new_binary(2, vec![0.0; 7]).is_err());
    }

    #[test]
    fn threshold_binarizes_strictly_above() {
        let grid = VoxelGrid::new_probabilistic(1, vec![0.5]).unwrap();
        assert_eq!(grid.threshold(0.5).unwrap().values(), &[0.0]);
        assert_eq!(grid.threshold(0.4).unwrap().values(), &[1.0]);
        assert!(grid.threshold(1.0).is_err());
    }
}
