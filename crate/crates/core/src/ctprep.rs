//! CT preprocessing: HU windowing, isotropic resampling, nose-to-acromion
//! slab selection and resizing to the extractor grid, applied in that order.

use crate::error::{Error, Result};
use crate::volume::Grid3;

/// Slice ordering along z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    /// z grows from head towards feet; the nose slice precedes the acromion.
    #[default]
    HeadFirst,
    FeetFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Landmarks {
    pub nose_slice: usize,
    pub acromion_slice: usize,
}

/// Scalar volume (HU before windowing, `[0, 1]` after) with voxel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub voxels: Grid3<f32>,
    /// `[sx, sy, sz]` in millimetres.
    pub spacing: [f32; 3],
    pub landmarks: Option<Landmarks>,
    pub orientation: Orientation,
}

impl CtVolume {
    pub fn new(
        voxels: Grid3<f32>,
        spacing: [f32; 3],
        landmarks: Option<Landmarks>,
        orientation: Orientation,
    ) -> Result<Self> {
        let v = CtVolume {
            voxels,
            spacing,
            landmarks,
            orientation,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Validation(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if let Some(l) = self.landmarks {
            let depth = self.voxels.dims()[2];
            if l.nose_slice >= depth || l.acromion_slice >= depth {
                return Err(Error::Validation(format!(
                    "landmarks {l:?} outside {depth} slices"
                )));
            }
            let ordered = match self.orientation {
                Orientation::HeadFirst => l.nose_slice < l.acromion_slice,
                Orientation::FeetFirst => l.nose_slice > l.acromion_slice,
            };
            if !ordered {
                return Err(Error::Validation(format!(
                    "nose slice must lie above the acromion slice ({l:?}, {:?})",
                    self.orientation
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.voxels.dims()
    }
}

fn rescale_index(i: usize, from: usize, to: usize) -> usize {
    if from <= 1 || to <= 1 {
        return 0;
    }
    let v = (i as f64 * (to - 1) as f64 / (from - 1) as f64).round() as usize;
    v.min(to - 1)
}

fn rescale_landmarks(l: Option<Landmarks>, from: usize, to: usize) -> Option<Landmarks> {
    l.map(|l| Landmarks {
        nose_slice: rescale_index(l.nose_slice, from, to),
        acromion_slice: rescale_index(l.acromion_slice, from, to),
    })
}

/// `(clamp(v, lo, hi) - lo) / (hi - lo)`.
pub fn clip_and_normalize(volume: &CtVolume, lo: f32, hi: f32) -> Result<CtVolume> {
    if !(lo < hi) {
        return Err(Error::Validation(format!("HU window [{lo}, {hi}] is empty")));
    }
    let span = hi - lo;
    Ok(CtVolume {
        voxels: volume.voxels.map(|v| (v.clamp(lo, hi) - lo) / span),
        ..volume.clone()
    })
}

/// Trilinear resampling to `target_spacing` mm on every axis. Each extent
/// becomes `round(extent * spacing / target)`.
pub fn resample_isotropic(volume: &CtVolume, target_spacing: f32) -> Result<CtVolume> {
    if !(target_spacing > 0.0) {
        return Err(Error::Resample(format!("target spacing {target_spacing} must be > 0")));
    }
    let dims = volume.dims();
    if dims.contains(&1) {
        return Err(Error::Resample(format!("cannot resample a single-voxel axis in {dims:?}")));
    }
    let mut out = [0usize; 3];
    for a in 0..3 {
        let n = (dims[a] as f64 * volume.spacing[a] as f64 / target_spacing as f64).round() as usize;
        if n < 1 {
            return Err(Error::Resample(format!(
                "axis {a} collapses: {} voxels at {} mm",
                dims[a], volume.spacing[a]
            )));
        }
        out[a] = n;
    }
    Ok(CtVolume {
        voxels: volume.voxels.resize_trilinear(out)?,
        spacing: [target_spacing; 3],
        landmarks: rescale_landmarks(volume.landmarks, dims[2], out[2]),
        orientation: volume.orientation,
    })
}

/// Inclusive z-range from `margin_mm` beyond the nose slice to `margin_mm`
/// beyond the acromion slice, clipped to the volume.
pub fn slab_range(volume: &CtVolume, margin_mm: f32) -> Result<(usize, usize)> {
    let l = volume
        .landmarks
        .ok_or_else(|| Error::LandmarkRequired("slab selection needs nose and acromion slices".into()))?;
    if !(margin_mm >= 0.0) {
        return Err(Error::Validation(format!("slab margin {margin_mm} must be >= 0")));
    }
    let depth = volume.dims()[2];
    let margin = (margin_mm as f64 / volume.spacing[2] as f64).round() as usize;
    let top = l.nose_slice.min(l.acromion_slice);
    let bottom = l.nose_slice.max(l.acromion_slice);
    Ok((top.saturating_sub(margin), (bottom + margin).min(depth - 1)))
}

pub fn slab_select(volume: &CtVolume, margin_mm: f32) -> Result<CtVolume> {
    let (z0, z1) = slab_range(volume, margin_mm)?;
    let l = volume.landmarks.expect("checked by slab_range");
    Ok(CtVolume {
        voxels: volume.voxels.slab(z0, z1 + 1)?,
        landmarks: Some(Landmarks {
            nose_slice: l.nose_slice - z0,
            acromion_slice: l.acromion_slice - z0,
        }),
        ..volume.clone()
    })
}

/// Trilinear resize to exactly `target` (`[W, H, D]`), aspect not preserved.
pub fn resize_to(volume: &CtVolume, target: [usize; 3]) -> Result<CtVolume> {
    let dims = volume.dims();
    let mut spacing = volume.spacing;
    for a in 0..3 {
        spacing[a] = (volume.spacing[a] as f64 * dims[a] as f64 / target[a].max(1) as f64) as f32;
    }
    Ok(CtVolume {
        voxels: volume.voxels.resize_trilinear(target)?,
        spacing,
        landmarks: rescale_landmarks(volume.landmarks, dims[2], target[2]),
        orientation: volume.orientation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepParams {
    pub hu_lo: f32,
    pub hu_hi: f32,
    pub target_spacing: f32,
    pub slab_margin_mm: f32,
    /// `[W, H, D]` extractor input grid.
    pub target_extent: [usize; 3],
}

impl Default for PrepParams {
    fn default() -> Self {
        PrepParams {
            hu_lo: -400.0,
            hu_hi: 400.0,
            target_spacing: 1.0,
            slab_margin_mm: 30.0,
            target_extent: [150, 150, 90],
        }
    }
}

/// Window, resample, slab and resize.
pub fn preprocess(volume: &CtVolume, p: &PrepParams) -> Result<CtVolume> {
    let v = clip_and_normalize(volume, p.hu_lo, p.hu_hi)?;
    let v = resample_isotropic(&v, p.target_spacing)?;
    let v = slab_select(&v, p.slab_margin_mm)?;
    resize_to(&v, p.target_extent)
}

/// Carries a binary mask through the geometric steps of [`preprocess`] with
/// the volume's spacing and landmarks, re-binarized at 0.5.
pub fn preprocess_mask(mask: &Grid3<f32>, like: &CtVolume, p: &PrepParams) -> Result<Grid3<f32>> {
    if mask.dims() != like.dims() {
        return Err(Error::Dimension(format!(
            "mask {:?} does not match volume {:?}",
            mask.dims(),
            like.dims()
        )));
    }
    let m = CtVolume {
        voxels: mask.clone(),
        ..like.clone()
    };
    let m = resample_isotropic(&m, p.target_spacing)?;
    let m = slab_select(&m, p.slab_margin_mm)?;
    let m = resize_to(&m, p.target_extent)?;
    Ok(m.voxels.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], spacing: [f32; 3], f: impl FnMut(usize, usize, usize) -> f32) -> CtVolume {
        CtVolume::new(Grid3::from_fn(dims, f).unwrap(), spacing, None, Orientation::HeadFirst).unwrap()
    }

    #[test]
    fn window_reference_points() {
        let hu = [1000.0, -1000.0, 0.0, 200.0, -400.0, 400.0];
        let v = CtVolume::new(
            Grid3::new([6, 1, 1], hu.to_vec()).unwrap(),
            [1.0; 3],
            None,
            Orientation::HeadFirst,
        )
        .unwrap();
        let n = clip_and_normalize(&v, -400.0, 400.0).unwrap();
        assert_eq!(n.voxels.data(), &[1.0, 0.0, 0.5, 0.75, 0.0, 1.0]);
        assert!(clip_and_normalize(&v, 10.0, 10.0).is_err());
    }

    #[test]
    fn resample_extents_and_identity() {
        let v = vol([100, 100, 50], [0.5, 0.5, 2.0], |_, _, _| 0.0);
        assert_eq!(resample_isotropic(&v, 1.0).unwrap().dims(), [50, 50, 100]);
        let v = vol([6, 5, 4], [1.0; 3], |x, y, z| (x * 31 + y * 7 + z) as f32 * 0.01);
        let r = resample_isotropic(&v, 1.0).unwrap();
        for (a, b) in r.voxels.data().iter().zip(v.voxels.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let flat = vol([1, 5, 5], [1.0; 3], |_, _, _| 0.0);
        assert!(matches!(resample_isotropic(&flat, 1.0), Err(Error::Resample(_))));
    }

    #[test]
    fn slab_reference_cases() {
        let mut v = vol([2, 2, 220], [1.0; 3], |_, _, z| z as f32);
        v.landmarks = Some(Landmarks {
            nose_slice: 60,
            acromion_slice: 160,
        });
        assert_eq!(slab_range(&v, 30.0).unwrap(), (30, 190));
        assert_eq!(slab_range(&v, 0.0).unwrap(), (60, 160));
        let s = slab_select(&v, 30.0).unwrap();
        assert_eq!(s.dims()[2], 161);
        assert_eq!(s.voxels.get(0, 0, 0), 30.0);
        assert_eq!(s.landmarks.unwrap().nose_slice, 30);
        v.landmarks = None;
        assert!(matches!(slab_select(&v, 30.0), Err(Error::LandmarkRequired(_))));
    }

    #[test]
    fn slab_edges_clip() {
        // (nose, acromion, margin_mm, depth) -> expected inclusive range
        let table = [
            ((5, 40, 30.0, 50), (0, 49)),
            ((0, 49, 10.0, 50), (0, 49)),
            ((10, 20, 10.0, 50), (0, 30)),
            ((30, 45, 10.0, 50), (20, 49)),
            ((3, 4, 0.0, 50), (3, 4)),
        ];
        for ((nose, acro, margin, depth), want) in table {
            let mut v = vol([1, 1, depth], [1.0; 3], |_, _, _| 0.0);
            v.landmarks = Some(Landmarks {
                nose_slice: nose,
                acromion_slice: acro,
            });
            assert_eq!(slab_range(&v, margin).unwrap(), want, "{nose} {acro} {margin}");
        }
        // 2 mm slices: 30 mm is 15 slices
        let mut v = vol([1, 1, 100], [1.0, 1.0, 2.0], |_, _, _| 0.0);
        v.landmarks = Some(Landmarks {
            nose_slice: 20,
            acromion_slice: 60,
        });
        assert_eq!(slab_range(&v, 30.0).unwrap(), (5, 75));
    }

    #[test]
    fn feet_first_ordering() {
        let g = Grid3::filled([2, 2, 10], 0.0).unwrap();
        let l = Some(Landmarks {
            nose_slice: 7,
            acromion_slice: 2,
        });
        assert!(CtVolume::new(g.clone(), [1.0; 3], l, Orientation::HeadFirst).is_err());
        let v = CtVolume::new(g, [1.0; 3], l, Orientation::FeetFirst).unwrap();
        assert_eq!(slab_range(&v, 1.0).unwrap(), (1, 8));
    }

    #[test]
    fn resize_exact_extent_identity_constant() {
        let v = vol([9, 7, 5], [1.0; 3], |x, y, z| (x + y * z) as f32);
        assert_eq!(resize_to(&v, [150, 150, 90]).unwrap().dims(), [150, 150, 90]);
        assert_eq!(resize_to(&v, [9, 7, 5]).unwrap().voxels, v.voxels);
        let c = vol([9, 7, 5], [1.0; 3], |_, _, _| 0.3);
        assert!(resize_to(&c, [4, 11, 3]).unwrap().voxels.data().iter().all(|&v| v == 0.3));
    }
}
