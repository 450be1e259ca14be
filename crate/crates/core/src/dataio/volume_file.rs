//! `GMGV` container, all fields little-endian:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `GMGV`                       |
//! | 4      | 2    | format version (1)                 |
//! | 6      | 2    | dtype code (0 = f32)               |
//! | 8      | 12   | extents W, H, D as u32             |
//! | 20     | 12   | spacing x, y, z as f32 millimetres |
//! | 32     | ...  | W*H*D f32 voxels, x fastest        |

use std::path::Path;

use crate::ctprep::{CtVolume, Orientation};
use crate::error::{Error, Result};
use crate::volume::Grid3;

pub const VOLUME_MAGIC: &[u8; 4] = b"GMGV";
pub const VOLUME_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
const DTYPE_F32: u16 = 0;

pub fn encode_volume(volume: &CtVolume) -> Vec<u8> {
    encode(&volume.voxels, volume.spacing)
}

fn encode(grid: &Grid3<f32>, spacing: [f32; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn field<const N: usize>(bytes: &[u8], offset: usize) -> Result<[u8; N]> {
    bytes
        .get(offset..offset + N)
        .map(|s| s.try_into().expect("slice of length N"))
        .ok_or(Error::Truncated {
            offset,
            expected: N,
            actual: bytes.len().saturating_sub(offset),
        })
}

/// Parses a container; landmarks are not stored in the file.
pub fn decode_volume(bytes: &[u8]) -> Result<CtVolume> {
    let magic: [u8; 4] = field(bytes, 0)?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            reason: format!("bad magic {magic:02x?}, expected \"GMGV\""),
        });
    }
    let version = u16::from_le_bytes(field(bytes, 4)?);
    if version != VOLUME_VERSION {
        return Err(Error::Parse {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let dtype = u16::from_le_bytes(field(bytes, 6)?);
    if dtype != DTYPE_F32 {
        return Err(Error::Parse {
            offset: 6,
            reason: format!("unsupported dtype code {dtype}"),
        });
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        *d = u32::from_le_bytes(field(bytes, 8 + 4 * a)?) as usize;
    }
    if dims.contains(&0) {
        return Err(Error::Parse {
            offset: 8,
            reason: format!("zero extent in {dims:?}"),
        });
    }
    let mut spacing = [0f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = f32::from_le_bytes(field(bytes, 20 + 4 * a)?);
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Parse {
            offset: 20,
            reason: format!("non-positive spacing {spacing:?}"),
        });
    }
    let expected = dims
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Parse {
            offset: 8,
            reason: format!("extents {dims:?} overflow"),
        })?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            offset: HEADER_LEN,
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Parse {
            offset: HEADER_LEN + expected,
            reason: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(CtVolume {
        voxels: Grid3::new(dims, data)?,
        spacing,
        landmarks: None,
        orientation: Orientation::HeadFirst,
    })
}

pub fn write_volume(volume: &CtVolume, path: &Path) -> Result<()> {
    std::fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<CtVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// Writes any grid (heatmaps, masks) in the same container.
pub fn write_grid(grid: &Grid3<f32>, spacing: [f32; 3], path: &Path) -> Result<()> {
    std::fs::write(path, encode(grid, spacing)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Grid3<f32>> {
    Ok(read_volume(path)?.voxels)
}
