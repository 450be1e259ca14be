//! Grad-CAM heatmaps for the positive class and VOI extraction from them.
//!
//! Channel weights are spatial means of the score gradient over all three
//! axes; the map is the ReLU of the weighted channel sum, upsampled to the
//! input grid and max-normalized.

use std::collections::VecDeque;

use crate::densenet::Model;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::volume::Grid3;

/// Heat aligned to the model input grid, normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T> {
    pub values: Grid3<T>,
    /// `[w, h, d]` of the feature map the heat was upsampled from.
    pub source_shape: [usize; 3],
}

/// Axis-aligned crop with half-open bounds `[lo, hi)` per axis, in input
/// voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoiBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub z0: usize,
    pub z1: usize,
    /// `[W, H, D]` requested extent.
    pub target_extent: [usize; 3],
}

impl VoiBox {
    pub fn origin(&self) -> [usize; 3] {
        [self.x0, self.y0, self.z0]
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.x1 - self.x0, self.y1 - self.y0, self.z1 - self.z0]
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y) && (self.z0..self.z1).contains(&z)
    }

    pub fn volume(&self) -> usize {
        self.extent().iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoiParams {
    /// Voxels at or above this fraction of the maximum feed the centroid.
    pub cam_threshold: f64,
    /// Maps whose maximum does not exceed this are rejected as signal-free.
    pub signal_floor: f64,
}

impl Default for VoiParams {
    fn default() -> Self {
        VoiParams {
            cam_threshold: 0.6,
            signal_floor: 0.05,
        }
    }
}

/// Spatial mean of the score gradient per channel.
pub fn channel_weights<T: Scalar>(activations: &Tensor<T>, score_grad: &[T]) -> Result<Vec<T>> {
    let [k, spatial] = single_sample(activations)?;
    if score_grad.len() != activations.numel() {
        return Err(dim_err!(
            "gradient of {} values for activations {:?}",
            score_grad.len(),
            activations.shape()
        ));
    }
    let inv = T::lit(1.0 / spatial as f64);
    Ok((0..k)
        .map(|c| score_grad[c * spatial..][..spatial].iter().copied().sum::<T>() * inv)
        .collect())
}

/// `max(0, sum_k weight_k * A^k)` on the feature grid, returned as `[w, h, d]`.
pub fn compute_cam<T: Scalar>(activations: &Tensor<T>, weights: &[T]) -> Result<Grid3<T>> {
    let [k, spatial] = single_sample(activations)?;
    if weights.len() != k {
        return Err(dim_err!("{} weights for {k} channels", weights.len()));
    }
    let s = activations.shape();
    let data = activations.data();
    let mut cam = vec![T::zero(); spatial];
    for (c, &w) in weights.iter().enumerate() {
        cam.iter_mut()
            .zip(&data[c * spatial..][..spatial])
            .for_each(|(acc, &a)| *acc += w * a);
    }
    cam.iter_mut().for_each(|v| *v = v.max(T::zero()));
    Grid3::new([s[4], s[3], s[2]], cam)
}

fn single_sample<T: Scalar>(activations: &Tensor<T>) -> Result<[usize; 2]> {
    match activations.shape() {
        [1, k, d, h, w] => Ok([*k, d * h * w]),
        other => Err(dim_err!("expected [1, K, d, h, w] activations, got {other:?}")),
    }
}

/// Corner-aligned trilinear upsampling to `extent` (`[W, H, D]`) followed by
/// division by the maximum. An all-zero map stays all-zero.
pub fn upsample_to_input<T: Scalar>(raw: &Grid3<T>, extent: [usize; 3]) -> Result<Heatmap<T>> {
    let mut values = raw.resize_trilinear(extent)?;
    normalize_max(&mut values);
    Ok(Heatmap {
        values,
        source_shape: raw.dims(),
    })
}

fn normalize_max<T: Scalar>(g: &mut Grid3<T>) {
    let m = g.max();
    if m > T::zero() {
        g.data_mut().iter_mut().for_each(|v| *v = *v / m);
    }
}

/// Foreground = voxels at or above `floor`, restricted to the largest
/// 6-connected component (lowest first voxel wins ties).
pub fn body_mask(intensity: &Grid3<f32>, floor: f32) -> Result<Vec<bool>> {
    let [nx, ny, nz] = intensity.dims();
    let fg: Vec<bool> = intensity.data().iter().map(|&v| v >= floor).collect();
    let mut label = vec![0u32; fg.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = intensity.coords(i);
            let mut visit = |j: usize| {
                if fg[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < nx {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - nx);
            }
            if y + 1 < ny {
                visit(i + nx);
            }
            if z > 0 {
                visit(i - nx * ny);
            }
            if z + 1 < nz {
                visit(i + nx * ny);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    if best.1 == 0 {
        return Err(Error::NoBody);
    }
    Ok(label.iter().map(|&l| l == best.0).collect())
}

/// Zeroes heat outside the body: below `intensity_floor` or outside the
/// largest connected foreground component. `body` holds normalized
/// intensities on the heatmap grid.
pub fn refine_mask<T: Scalar>(heatmap: &Heatmap<T>, body: &Grid3<f32>, intensity_floor: f32) -> Result<Heatmap<T>> {
    if body.dims() != heatmap.values.dims() {
        return Err(dim_err!(
            "body grid {:?} not aligned with heatmap {:?}",
            body.dims(),
            heatmap.values.dims()
        ));
    }
    let mask = body_mask(body, intensity_floor)?;
    let mut out = heatmap.clone();
    out.values
        .data_mut()
        .iter_mut()
        .zip(&mask)
        .filter(|(_, &keep)| !keep)
        .for_each(|(v, _)| *v = T::zero());
    Ok(out)
}

/// Heat-weighted centroid of voxels at or above `threshold * max`, as `[x, y, z]`.
pub fn hot_centroid<T: Scalar>(heat: &Grid3<T>, threshold: f64) -> Option<[f64; 3]> {
    let cut = heat.max().as_f64() * threshold;
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (i, &v) in heat.data().iter().enumerate() {
        let v = v.as_f64();
        if v > 0.0 && v >= cut {
            let c = heat.coords(i);
            for a in 0..3 {
                acc[a] += v * c[a] as f64;
            }
            total += v;
        }
    }
    (total > 0.0).then(|| acc.map(|s| s / total))
}

/// Places a box of exactly `target` (`[W, H, D]`) voxels so that the hot
/// centroid sits at box-relative index `target / 2`, shifting it back inside
/// the volume when it would cross an edge, and crops `volume` with it.
pub fn extract_voi<T: Scalar>(
    heatmap: &Heatmap<T>,
    volume: &Grid3<f32>,
    target: [usize; 3],
    params: &VoiParams,
) -> Result<(VoiBox, Grid3<f32>)> {
    let dims = heatmap.values.dims();
    if volume.dims() != dims {
        return Err(dim_err!("volume {:?} not aligned with heatmap {dims:?}", volume.dims()));
    }
    if (0..3).any(|a| target[a] == 0 || target[a] > dims[a]) {
        return Err(dim_err!("VOI extent {target:?} does not fit volume {dims:?}"));
    }
    let max = heatmap.values.max().as_f64();
    if !(max > params.signal_floor) {
        return Err(Error::NoSignal {
            max,
            floor: params.signal_floor,
        });
    }
    let c = hot_centroid(&heatmap.values, params.cam_threshold).ok_or(Error::NoSignal {
        max,
        floor: params.signal_floor,
    })?;
    let mut lo = [0usize; 3];
    for a in 0..3 {
        let start = (c[a] + 0.5).floor() as i64 - (target[a] / 2) as i64;
        lo[a] = start.clamp(0, (dims[a] - target[a]) as i64) as usize;
    }
    let voi = VoiBox {
        x0: lo[0],
        x1: lo[0] + target[0],
        y0: lo[1],
        y1: lo[1] + target[1],
        z0: lo[2],
        z1: lo[2] + target[2],
        target_extent: target,
    };
    let crop = volume.crop(lo, target)?;
    Ok((voi, crop))
}

/// Everything one Grad-CAM evaluation produces.
#[derive(Debug, Clone)]
pub struct GradCam<T> {
    pub heatmap: Heatmap<T>,
    pub raw: Grid3<T>,
    pub weights: Vec<T>,
    /// Model probability for the positive class.
    pub probability: T,
}

/// Eval-mode Grad-CAM of the positive-class logit for one `[1, C, D, H, W]`
/// sample.
pub fn grad_cam<T: Scalar>(model: &Model<T>, input: &Tensor<T>) -> Result<GradCam<T>> {
    if input.shape().first() != Some(&1) {
        return Err(dim_err!("grad_cam takes a single sample, got {:?}", input.shape()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = model.forward_eval(&mut tape, x)?;
    tape.backward(out.logits)?;
    let activations = tape.value(out.last_conv);
    let grad = tape
        .grad(out.last_conv)
        .ok_or_else(|| Error::Numerical("no gradient reached the last convolution".into()))?;
    let weights = channel_weights(activations, grad)?;
    let raw = compute_cam(activations, &weights)?;
    let [_, d, h, w] = model.config().input_shape;
    let heatmap = upsample_to_input(&raw, [w, h, d])?;
    Ok(GradCam {
        heatmap,
        raw,
        weights,
        probability: tape.value(out.probs).data()[0],
    })
}
