//! Dense voxel occupancy grids, binarization and the thresholded IoU metric.
//!
//! Flat index order is z-major, then y, then x (x fastest):
//! `index = (z * D + y) * D + x`.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

/// Largest supported grid edge length.
pub const MAX_RESOLUTION: usize = 64;

/// Default binarization threshold used by evaluation.
pub const DEFAULT_THRESHOLD: f32 = 0.3;

const MAGIC: &[u8; 4] = b"VXG1";
const FLAG_BITS: u8 = 0;
const FLAG_FLOATS: u8 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("threshold {0} outside the open interval (0, 1)")]
    InvalidThreshold(f32),
    #[error("resolution mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("unsupported resolution {0} (must be 1..={MAX_RESOLUTION})")]
    InvalidResolution(usize),
    #[error("value count {got} does not match resolution {resolution} (expected {expected})")]
    LengthMismatch {
        resolution: usize,
        expected: usize,
        got: usize,
    },
    #[error("occupancy value {value} at index {index} outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("bad magic bytes, not a .vxg file")]
    BadMagic,
    #[error("unknown payload flag {0}")]
    BadFlag(u8),
    #[error("truncated .vxg data: {0}")]
    Truncated(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GridError>;

fn check_resolution(resolution: usize) -> Result<usize> {
    if resolution == 0 || resolution > MAX_RESOLUTION {
        return Err(GridError::InvalidResolution(resolution));
    }
    Ok(resolution * resolution * resolution)
}

/// Cubic grid of occupancy values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    resolution: usize,
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(resolution: usize, values: Vec<f32>) -> Result<Self> {
        let expected = check_resolution(resolution)?;
        if values.len() != expected {
            return Err(GridError::LengthMismatch {
                resolution,
                expected,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(GridError::ValueOutOfRange { index, value });
        }
        Ok(Self { resolution, values })
    }

    pub fn filled(resolution: usize, value: f32) -> Result<Self> {
        let n = check_resolution(resolution)?;
        Self::new(resolution, vec![value; n])
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[flat_index(self.resolution, x, y, z)]
    }
}

impl From<&BinaryGrid> for VoxelGrid {
    fn from(grid: &BinaryGrid) -> Self {
        Self {
            resolution: grid.resolution,
            values: grid
                .bits
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// Thresholded occupancy.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    resolution: usize,
    bits: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(resolution: usize, bits: Vec<bool>) -> Result<Self> {
        let expected = check_resolution(resolution)?;
        if bits.len() != expected {
            return Err(GridError::LengthMismatch {
                resolution,
                expected,
                got: bits.len(),
            });
        }
        Ok(Self { resolution, bits })
    }

    pub fn empty(resolution: usize) -> Result<Self> {
        let n = check_resolution(resolution)?;
        Ok(Self {
            resolution,
            bits: vec![false; n],
        })
    }

    pub fn full(resolution: usize) -> Result<Self> {
        let n = check_resolution(resolution)?;
        Ok(Self {
            resolution,
            bits: vec![true; n],
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[flat_index(self.resolution, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = flat_index(self.resolution, x, y, z);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }
}

pub fn flat_index(resolution: usize, x: usize, y: usize, z: usize) -> usize {
    (z * resolution + y) * resolution + x
}

/// Inverse of [`flat_index`], returns `(x, y, z)`.
pub fn coords(resolution: usize, index: usize) -> (usize, usize, usize) {
    let x = index % resolution;
    let y = (index / resolution) % resolution;
    let z = index / (resolution * resolution);
    (x, y, z)
}

/// Bit `j` is set iff `values[j] > threshold`.
pub fn binarize(grid: &VoxelGrid, threshold: f32) -> Result<BinaryGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GridError::InvalidThreshold(threshold));
    }
    Ok(BinaryGrid {
        resolution: grid.resolution,
        bits: grid.values.iter().map(|&v| v > threshold).collect(),
    })
}

/// Voxelwise `(|a AND b|, |a OR b|)`.
pub fn count_and_or(a: &BinaryGrid, b: &BinaryGrid) -> Result<(usize, usize)> {
    if a.resolution != b.resolution {
        return Err(GridError::DimensionMismatch {
            left: a.resolution,
            right: b.resolution,
        });
    }
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok((inter, union))
}

/// IoU between two binary grids; two empty grids score 1.
pub fn iou_binary(a: &BinaryGrid, b: &BinaryGrid) -> Result<f64> {
    let (inter, union) = count_and_or(a, b)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Thresholded IoU of a predicted occupancy grid against a binary truth.
pub fn iou(pred: &VoxelGrid, truth: &BinaryGrid, threshold: f32) -> Result<f64> {
    if pred.resolution != truth.resolution {
        return Err(GridError::DimensionMismatch {
            left: pred.resolution,
            right: truth.resolution,
        });
    }
    iou_binary(&binarize(pred, threshold)?, truth)
}

/// Encodes a binary grid as bit-packed `.vxg` bytes.
pub fn binary_to_bytes(grid: &BinaryGrid) -> Vec<u8> {
    let mut out = header(grid.resolution, FLAG_BITS);
    let mut packed = vec![0u8; grid.bits.len().div_ceil(8)];
    for (i, _) in grid.bits.iter().enumerate().filter(|(_, &b)| b) {
        packed[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&packed);
    out
}

/// Encodes an occupancy grid as float `.vxg` bytes.
pub fn voxels_to_bytes(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = header(grid.resolution, FLAG_FLOATS);
    out.reserve(grid.values.len() * 4);
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header(resolution: usize, flag: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(9);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(resolution as u32).to_le_bytes());
    out.push(flag);
    out
}

/// Decoded `.vxg` payload, keeping whichever representation was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredGrid {
    Binary(BinaryGrid),
    Occupancy(VoxelGrid),
}

impl StoredGrid {
    pub fn into_binary(self, threshold: f32) -> Result<BinaryGrid> {
        match self {
            StoredGrid::Binary(b) => Ok(b),
            StoredGrid::Occupancy(v) => binarize(&v, threshold),
        }
    }

    pub fn into_voxels(self) -> VoxelGrid {
        match self {
            StoredGrid::Binary(b) => VoxelGrid::from(&b),
            StoredGrid::Occupancy(v) => v,
        }
    }
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<StoredGrid> {
    if bytes.len() < 4 {
        return Err(GridError::Truncated("missing magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(GridError::BadMagic);
    }
    if bytes.len() < 9 {
        return Err(GridError::Truncated("missing header"));
    }
    let resolution = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = check_resolution(resolution)?;
    let flag = bytes[8];
    let payload = &bytes[9..];
    match flag {
        FLAG_BITS => {
            let expected = n.div_ceil(8);
            if payload.len() != expected {
                return Err(GridError::LengthMismatch {
                    resolution,
                    expected,
                    got: payload.len(),
                });
            }
            let bits = (0..n).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
            Ok(StoredGrid::Binary(BinaryGrid { resolution, bits }))
        }
        FLAG_FLOATS => {
            if payload.len() != n * 4 {
                return Err(GridError::LengthMismatch {
                    resolution,
                    expected: n * 4,
                    got: payload.len(),
                });
            }
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(StoredGrid::Occupancy(VoxelGrid::new(resolution, values)?))
        }
        other => Err(GridError::BadFlag(other)),
    }
}

pub fn write_binary(path: &Path, grid: &BinaryGrid) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&binary_to_bytes(grid))?;
    Ok(())
}

pub fn write_voxels(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&voxels_to_bytes(grid))?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<StoredGrid> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    grid_from_bytes(&bytes)
}
