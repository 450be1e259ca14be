//! Quantitative Grad-CAM localization against truth masks.

use crate::error::{dim_err, Result};
use crate::gradcam::VoiBox;
use crate::scalar::Scalar;
use crate::volume::Grid3;

pub struct LocalizationSample<'a, T> {
    pub heatmap: &'a Grid3<T>,
    pub voi: Option<&'a VoiBox>,
    pub mask: &'a Grid3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    pub hits: usize,
    pub evaluated: usize,
    /// Samples skipped for an empty mask.
    pub skipped: usize,
    pub hit_rate: f64,
    /// Over samples that have a box.
    pub mean_iou: f64,
    pub ious: Vec<Option<f64>>,
}

/// Half-open bounding box `[x0, x1, y0, y1, z0, z1]` of mask voxels `>= 0.5`.
pub fn mask_bbox(mask: &Grid3<f32>) -> Option<[usize; 6]> {
    let mut b: Option<[usize; 6]> = None;
    for (i, &v) in mask.data().iter().enumerate() {
        if v >= 0.5 {
            let [x, y, z] = mask.coords(i);
            let e = b.get_or_insert([x, x + 1, y, y + 1, z, z + 1]);
            for (a, c) in [x, y, z].into_iter().enumerate() {
                e[2 * a] = e[2 * a].min(c);
                e[2 * a + 1] = e[2 * a + 1].max(c + 1);
            }
        }
    }
    b
}

/// Voxel-count intersection over union of two half-open boxes.
pub fn box_iou(a: [usize; 6], b: [usize; 6]) -> f64 {
    let vol = |v: [usize; 6]| (0..3).map(|k| v[2 * k + 1].saturating_sub(v[2 * k])).product::<usize>();
    let inter: usize = (0..3)
        .map(|k| a[2 * k + 1].min(b[2 * k + 1]).saturating_sub(a[2 * k].max(b[2 * k])))
        .product();
    let union = vol(a) + vol(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Hit when the heatmap argmax lies inside the mask; IoU between the VOI box
/// and the mask bounding box.
pub fn localization_eval<T: Scalar>(samples: &[LocalizationSample<'_, T>]) -> Result<LocalizationReport> {
    let (mut hits, mut evaluated, mut skipped) = (0, 0, 0);
    let mut ious = Vec::with_capacity(samples.len());
    for s in samples {
        if s.mask.dims() != s.heatmap.dims() {
            return Err(dim_err!("mask {:?} not aligned with heatmap {:?}", s.mask.dims(), s.heatmap.dims()));
        }
        let Some(bbox) = mask_bbox(s.mask) else {
            skipped += 1;
            ious.push(None);
            continue;
        };
        evaluated += 1;
        if s.mask.data()[s.heatmap.argmax()] >= 0.5 {
            hits += 1;
        }
        ious.push(s.voi.map(|v| box_iou([v.x0, v.x1, v.y0, v.y1, v.z0, v.z1], bbox)));
    }
    let boxed: Vec<f64> = ious.iter().flatten().copied().collect();
    Ok(LocalizationReport {
        hits,
        evaluated,
        skipped,
        hit_rate: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
        mean_iou: if boxed.is_empty() {
            0.0
        } else {
            boxed.iter().sum::<f64>() / boxed.len() as f64
        },
        ious,
    })
}
