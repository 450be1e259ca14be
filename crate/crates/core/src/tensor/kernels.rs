//! Forward and backward kernels over flat row-major buffers.
//!
//! These know nothing about the tape; they are exposed so that tests and
//! oracles can call them directly.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Output index range `[lo, hi)` for which `o * stride + k - pad` lands inside `[0, in_len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Geometry of a 3-D convolution, validated once and shared by both passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let [n, cin, d, h, w] = <[usize; 5]>::try_from(input_shape)
            .map_err(|_| dim_err!("conv3d input must be 5-D, got {input_shape:?}"))?;
        let [cout, wcin, kd, kh, kw] = <[usize; 5]>::try_from(weight_shape)
            .map_err(|_| dim_err!("conv3d weight must be 5-D, got {weight_shape:?}"))?;
        if wcin != cin {
            return Err(dim_err!(
                "conv3d weight expects {wcin} input channels, input has {cin}"
            ));
        }
        if stride.contains(&0) {
            return Err(dim_err!("conv3d stride must be >= 1, got {stride:?}"));
        }
        let input = [d, h, w];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding[a];
            if kernel[a] > padded {
                return Err(dim_err!(
                    "conv3d kernel {kernel:?} exceeds padded input {input:?} (padding {padding:?})"
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Conv3dGeom {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.output;
        [self.batch, self.out_channels, d, h, w]
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (kernel offset, output row, input row) triple that touches
    /// valid input, handing the callback the weight offset within one
    /// `[kd,kh,kw]` kernel, the output row start, the input row start, and the
    /// valid output column range with its first input column.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let [id_, ih_, iw_] = self.input;
        let [od_, oh_, ow_] = self.output;
        let [kd_, kh_, kw_] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.padding;
        for kd in 0..kd_ {
            let (d_lo, d_hi) = valid_range(kd, pd, sd, id_, od_);
            for kh in 0..kh_ {
                let (h_lo, h_hi) = valid_range(kh, ph, sh, ih_, oh_);
                for kw in 0..kw_ {
                    let (w_lo, w_hi) = valid_range(kw, pw, sw, iw_, ow_);
                    if w_lo >= w_hi {
                        continue;
                    }
                    let k_off = (kd * kh_ + kh) * kw_ + kw;
                    let iw0 = w_lo * sw + kw - pw;
                    for od in d_lo..d_hi {
                        let id = od * sd + kd - pd;
                        for oh in h_lo..h_hi {
                            let ih = oh * sh + kh - ph;
                            f(
                                k_off,
                                (od * oh_ + oh) * ow_,
                                (id * ih_ + ih) * iw_,
                                w_lo,
                                w_hi,
                                iw0,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds one `[C, D, H, W]` sample into a `[C * kvol, out_plane]` patch
/// matrix; positions that fall in the padding stay zero.
fn im2col<T: Scalar>(g: &Conv3dGeom, src: &[T], col: &mut [T]) {
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let kvol = g.kernel_volume();
    let sw = g.stride[2];
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.in_channels {
        let s = &src[ci * in_plane..][..in_plane];
        g.for_each_row(|k, out_row, in_row, lo, hi, i0| {
            let dst = &mut col[(ci * kvol + k) * out_plane + out_row..][lo..hi];
            if sw == 1 {
                dst.copy_from_slice(&s[in_row + i0..in_row + i0 + (hi - lo)]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = s[in_row + i0 + j * sw];
                }
            }
        });
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im<T: Scalar>(g: &Conv3dGeom, col: &[T], dst: &mut [T]) {
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let kvol = g.kernel_volume();
    let sw = g.stride[2];
    for ci in 0..g.in_channels {
        let d = &mut dst[ci * in_plane..][..in_plane];
        g.for_each_row(|k, out_row, in_row, lo, hi, i0| {
            let src = &col[(ci * kvol + k) * out_plane + out_row..][lo..hi];
            if sw == 1 {
                d[in_row + i0..in_row + i0 + (hi - lo)]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a += b);
            } else {
                for (j, &b) in src.iter().enumerate() {
                    d[in_row + i0 + j * sw] += b;
                }
            }
        });
    }
}

/// Cross-correlation (no kernel flip) plus optional per-output-channel bias.
pub fn conv3d_forward<T: Scalar>(
    g: &Conv3dGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_sample = g.in_channels * g.in_plane();
    let out_plane = g.out_plane();
    let ck = g.in_channels * g.kernel_volume();
    let mut out = vec![T::zero(); g.batch * g.out_channels * out_plane];
    out.par_chunks_mut(g.out_channels * out_plane)
        .enumerate()
        .for_each(|(n, y)| {
            let mut col = vec![T::zero(); ck * out_plane];
            im2col(g, &input[n * in_sample..][..in_sample], &mut col);
            T::gemm(false, false, g.out_channels, ck, out_plane, weight, &col, T::zero(), y);
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(out_plane).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
    out
}

/// Gradients of [`conv3d_forward`] with respect to input, weight and bias.
pub fn conv3d_backward<T: Scalar>(
    g: &Conv3dGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let in_sample = g.in_channels * g.in_plane();
    let out_plane = g.out_plane();
    let out_sample = g.out_channels * out_plane;
    let ck = g.in_channels * g.kernel_volume();

    let grad_input = need_input.then(|| {
        let mut gin = vec![T::zero(); g.batch * in_sample];
        gin.par_chunks_mut(in_sample).enumerate().for_each(|(n, dst)| {
            let mut col = vec![T::zero(); ck * out_plane];
            let go = &grad_out[n * out_sample..][..out_sample];
            T::gemm(true, false, ck, g.out_channels, out_plane, weight, go, T::zero(), &mut col);
            col2im(g, &col, dst);
        });
        gin
    });

    // Per-sample products summed in sample order, so the result does not
    // depend on thread scheduling.
    let grad_weight = need_weight.then(|| {
        let per_sample: Vec<Vec<T>> = (0..g.batch)
            .into_par_iter()
            .map(|n| {
                let mut col = vec![T::zero(); ck * out_plane];
                im2col(g, &input[n * in_sample..][..in_sample], &mut col);
                let mut gw = vec![T::zero(); g.out_channels * ck];
                let go = &grad_out[n * out_sample..][..out_sample];
                T::gemm(false, true, g.out_channels, out_plane, ck, go, &col, T::zero(), &mut gw);
                gw
            })
            .collect();
        let mut gw = vec![T::zero(); g.out_channels * ck];
        for s in per_sample {
            gw.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        gw
    });

    let grad_bias = need_bias.then(|| {
        (0..g.out_channels)
            .map(|co| {
                (0..g.batch)
                    .map(|n| {
                        grad_out[(n * g.out_channels + co) * out_plane..][..out_plane]
                            .iter()
                            .copied()
                            .sum::<T>()
                    })
                    .sum()
            })
            .collect()
    });

    (grad_input, grad_weight, grad_bias)
}

/// Values saved by a training-mode batch norm for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

/// Per-channel batch statistics over `(N, spatial)` and the affine transform.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    eps: T,
) -> (Vec<T>, BatchNormSaved<T>) {
    let count = (batch * spatial) as f64;
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    let mut inv_std = vec![T::zero(); channels];
    for c in 0..channels {
        let planes = (0..batch).map(|n| &x[(n * channels + c) * spatial..][..spatial]);
        let m = planes.clone().flatten().map(|v| v.as_f64()).sum::<f64>() / count;
        let v = planes
            .flatten()
            .map(|v| {
                let d = v.as_f64() - m;
                d * d
            })
            .sum::<f64>()
            / count;
        mean[c] = T::lit(m);
        var[c] = T::lit(v);
        inv_std[c] = T::lit(1.0 / (v + eps.as_f64()).sqrt());
    }
    let mut normalized = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                let xh = (x[i] - mean[c]) * inv_std[c];
                normalized[i] = xh;
                y[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    (
        y,
        BatchNormSaved {
            normalized,
            inv_std,
            mean,
            var,
        },
    )
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for a training-mode batch norm.
pub fn batchnorm_train_backward<T: Scalar>(
    grad_y: &[T],
    saved: &BatchNormSaved<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::lit((batch * spatial) as f64);
    let mut gx = vec![T::zero(); grad_y.len()];
    let mut gg = vec![T::zero(); channels];
    let mut gb = vec![T::zero(); channels];
    for c in 0..channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                sum_dy += grad_y[i];
                sum_dy_xh += grad_y[i] * saved.normalized[i];
            }
        }
        gg[c] = sum_dy_xh;
        gb[c] = sum_dy;
        let scale = gamma[c] * saved.inv_std[c] / m;
        for n in 0..batch {
            let off = (n * channels + c) * spatial;
            for i in off..off + spatial {
                gx[i] = scale * (m * grad_y[i] - sum_dy - saved.normalized[i] * sum_dy_xh);
            }
        }
    }
    (gx, gg, gb)
}

/// Output extent of an unpadded pooling window.
pub fn pool_output(input: [usize; 3], window: [usize; 3], stride: [usize; 3]) -> Result<[usize; 3]> {
    if stride.contains(&0) || window.contains(&0) {
        return Err(dim_err!("pool window {window:?} / stride {stride:?} must be >= 1"));
    }
    let mut out = [0; 3];
    for a in 0..3 {
        if window[a] > input[a] {
            return Err(dim_err!(
                "pool window {window:?} larger than input extent {input:?}"
            ));
        }
        out[a] = (input[a] - window[a]) / stride[a] + 1;
    }
    Ok(out)
}

/// Windowed maximum over each `[D,H,W]` plane; returns values and the flat
/// input index of each maximum (first occurrence wins ties).
pub fn maxpool3d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    input: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    output: [usize; 3],
) -> (Vec<T>, Vec<usize>) {
    let in_plane: usize = input.iter().product();
    let out_plane: usize = output.iter().product();
    let mut out = Vec::with_capacity(planes * out_plane);
    let mut arg = Vec::with_capacity(planes * out_plane);
    for p in 0..planes {
        let base = p * in_plane;
        for od in 0..output[0] {
            for oh in 0..output[1] {
                for ow in 0..output[2] {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for kd in 0..window[0] {
                        for kh in 0..window[1] {
                            for kw in 0..window[2] {
                                let i = base
                                    + ((od * stride[0] + kd) * input[1] + oh * stride[1] + kh) * input[2]
                                    + ow * stride[2]
                                    + kw;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}

/// Windowed mean over each `[D,H,W]` plane.
pub fn avgpool3d_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    input: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    output: [usize; 3],
) -> Vec<T> {
    let in_plane: usize = input.iter().product();
    let inv = T::lit(1.0 / window.iter().product::<usize>() as f64);
    let mut out = Vec::with_capacity(planes * output.iter().product::<usize>());
    for p in 0..planes {
        let base = p * in_plane;
        for od in 0..output[0] {
            for oh in 0..output[1] {
                for ow in 0..output[2] {
                    let mut acc = T::zero();
                    for kd in 0..window[0] {
                        for kh in 0..window[1] {
                            let row = base
                                + ((od * stride[0] + kd) * input[1] + oh * stride[1] + kh) * input[2]
                                + ow * stride[2];
                            acc += x[row..row + window[2]].iter().copied().sum::<T>();
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
    }
    out
}

pub fn avgpool3d_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    input: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    output: [usize; 3],
) -> Vec<T> {
    let in_plane: usize = input.iter().product();
    let inv = T::lit(1.0 / window.iter().product::<usize>() as f64);
    let mut gx = vec![T::zero(); planes * in_plane];
    let mut o = 0;
    for p in 0..planes {
        let base = p * in_plane;
        for od in 0..output[0] {
            for oh in 0..output[1] {
                for ow in 0..output[2] {
                    let g = grad_out[o] * inv;
                    o += 1;
                    for kd in 0..window[0] {
                        for kh in 0..window[1] {
                            let row = base
                                + ((od * stride[0] + kd) * input[1] + oh * stride[1] + kh) * input[2]
                                + ow * stride[2];
                            gx[row..row + window[2]].iter_mut().for_each(|v| *v += g);
                        }
                    }
                }
            }
        }
    }
    gx
}

/// `y[n,o] = sum_f x[n,f] * w[o,f] + b[o]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    batch: usize,
    features: usize,
    outputs: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * outputs);
    for n in 0..batch {
        let xr = &x[n * features..][..features];
        for o in 0..outputs {
            let wr = &w[o * features..][..features];
            y.push(xr.iter().zip(wr).fold(b[o], |acc, (&a, &c)| acc + a * c));
        }
    }
    y
}
