//! 8-bit grayscale PGM (P5) slice exports for visual inspection.

use std::path::{Path, PathBuf};

use crate::error::{dim_err, Error, Result};
use crate::gradcam::VoiBox;
use crate::scalar::Scalar;
use crate::volume::Grid3;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Files written for one exported slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceExport {
    pub z: usize,
    pub ct: PathBuf,
    pub heat: PathBuf,
    pub overlay: PathBuf,
}

/// Writes `(ct, heat, overlay)` PGMs for every `stride`-th axial slice.
///
/// `volume` holds normalized `[0, 1]` intensities. The overlay brightens each
/// pixel towards white in proportion to its heat, so zero heat reproduces the
/// CT slice; when `voi` is given its outline is drawn at full brightness on
/// the slices it spans.
pub fn export_heatmap_slices<T: Scalar>(
    heatmap: &Grid3<T>,
    volume: &Grid3<f32>,
    out_dir: &Path,
    stride: usize,
    voi: Option<&VoiBox>,
) -> Result<Vec<SliceExport>> {
    if stride == 0 {
        return Err(Error::Validation("slice stride must be >= 1".into()));
    }
    if heatmap.dims() != volume.dims() {
        return Err(dim_err!(
            "heatmap {:?} not aligned with volume {:?}",
            heatmap.dims(),
            volume.dims()
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let [nx, ny, nz] = volume.dims();
    let mut written = Vec::new();
    for z in (0..nz).step_by(stride) {
        let mut ct = Vec::with_capacity(nx * ny);
        let mut heat = Vec::with_capacity(nx * ny);
        let mut overlay = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                let c = to_byte(volume.get(x, y, z) as f64);
                let h = heatmap.get(x, y, z).as_f64().clamp(0.0, 1.0);
                ct.push(c);
                heat.push(to_byte(h));
                let o = c as f64 + (255.0 - c as f64) * h;
                overlay.push(o.round() as u8);
            }
        }
        if let Some(b) = voi.filter(|b| (b.z0..b.z1).contains(&z)) {
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    if x == b.x0 || x + 1 == b.x1 || y == b.y0 || y + 1 == b.y1 {
                        overlay[y * nx + x] = 255;
                    }
                }
            }
        }
        let entry = SliceExport {
            z,
            ct: out_dir.join(format!("slice_{z:04}_ct.pgm")),
            heat: out_dir.join(format!("slice_{z:04}_heat.pgm")),
            overlay: out_dir.join(format!("slice_{z:04}_overlay.pgm")),
        };
        write_pgm(&entry.ct, nx, ny, &ct)?;
        write_pgm(&entry.heat, nx, ny, &heat)?;
        write_pgm(&entry.overlay, nx, ny, &overlay)?;
        written.push(entry);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(path: &Path) -> Vec<u8> {
        let bytes = std::fs::read(path).unwrap();
        // three header lines
        let mut newlines = 0;
        let start = bytes
            .iter()
            .position(|&b| {
                newlines += (b == b'\n') as usize;
                newlines == 3
            })
            .unwrap();
        bytes[start + 1..].to_vec()
    }

    #[test]
    fn stride_ten_over_ninety_slices() {
        let dir = tempfile::tempdir().unwrap();
        let heat = Grid3::<f32>::filled([4, 3, 90], 0.5).unwrap();
        let vol = Grid3::filled([4, 3, 90], 0.2).unwrap();
        let out = export_heatmap_slices(&heat, &vol, dir.path(), 10, None).unwrap();
        assert_eq!(out.len(), 9);
        assert_eq!(out.last().unwrap().z, 80);
        let out = export_heatmap_slices(&heat, &vol, dir.path(), 1, None).unwrap();
        assert_eq!(out.len(), 90);
    }

    #[test]
    fn zero_heat_overlay_equals_ct() {
        let dir = tempfile::tempdir().unwrap();
        let heat = Grid3::<f64>::filled([5, 4, 3], 0.0).unwrap();
        let vol = Grid3::from_fn([5, 4, 3], |x, y, z| (x + y + z) as f32 / 10.0).unwrap();
        let out = export_heatmap_slices(&heat, &vol, dir.path(), 1, None).unwrap();
        for s in out {
            let ct = pixels(&s.ct);
            assert_eq!(ct.len(), 20);
            assert_eq!(pixels(&s.overlay), ct);
        }
    }
}
