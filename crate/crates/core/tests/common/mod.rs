//! Independent reference implementations shared by the integration suites.
//! Everything here is written as plainly as possible: nested loops, no
//! reuse of library kernels.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// `|a - b| / max(1, |b|)` maximized over elements.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Direct convolution: `x` is `[n, ci, d, h, w]`, `wt` is `[co, ci, kd, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv3d(
    x: &[f64],
    xs: [usize; 5],
    wt: &[f64],
    ws: [usize; 5],
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 5]) {
    let [n, ci, d, h, w] = xs;
    let [co, _, kd, kh, kw] = ws;
    let od = (d + 2 * pad[0] - kd) / stride[0] + 1;
    let oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
    let ow = (w + 2 * pad[2] - kw) / stride[2] + 1;
    let mut out = vec![0.0; n * co * od * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map_or(0.0, |bv| bv[o]);
                        for c in 0..ci {
                            for i in 0..kd {
                                for j in 0..kh {
                                    for k in 0..kw {
                                        let iz = (z * stride[0] + i) as i64 - pad[0] as i64;
                                        let iy = (y * stride[1] + j) as i64 - pad[1] as i64;
                                        let ix = (xx * stride[2] + k) as i64 - pad[2] as i64;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as i64 || iy >= h as i64 || ix >= w as i64 {
                                            continue;
                                        }
                                        let xi = (((b * ci + c) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let wi = (((o * ci + c) * kd + i) * kh + j) * kw + k;
                                        acc += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * co + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, co, od, oh, ow])
}

/// Windowed max or mean over `[planes, d, h, w]`.
pub fn naive_pool(
    x: &[f64],
    planes: usize,
    dims: [usize; 3],
    window: [usize; 3],
    stride: [usize; 3],
    max: bool,
) -> (Vec<f64>, [usize; 3]) {
    let o: [usize; 3] = std::array::from_fn(|a| (dims[a] - window[a]) / stride[a] + 1);
    let mut out = Vec::new();
    for p in 0..planes {
        for z in 0..o[0] {
            for y in 0..o[1] {
                for xx in 0..o[2] {
                    let mut vals = Vec::new();
                    for i in 0..window[0] {
                        for j in 0..window[1] {
                            for k in 0..window[2] {
                                let zi = z * stride[0] + i;
                                let yi = y * stride[1] + j;
                                let xi = xx * stride[2] + k;
                                vals.push(x[((p * dims[0] + zi) * dims[1] + yi) * dims[2] + xi]);
                            }
                        }
                    }
                    out.push(if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    });
                }
            }
        }
    }
    (out, o)
}

/// Grad-CAM from scratch: per-channel mean gradient, weighted sum, clamp.
/// `acts` and `grads` are `[k, d, h, w]`; output is in `z, y, x` order.
pub fn brute_cam(acts: &[f64], grads: &[f64], k: usize, d: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut alpha = vec![0.0; k];
    for c in 0..k {
        let mut s = 0.0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    s += grads[((c * d + z) * h + y) * w + x];
                }
            }
        }
        alpha[c] = s / (d * h * w) as f64;
    }
    let mut cam = vec![0.0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut v = 0.0;
                for c in 0..k {
                    v += alpha[c] * acts[((c * d + z) * h + y) * w + x];
                }
                cam[(z * h + y) * w + x] = if v > 0.0 { v } else { 0.0 };
            }
        }
    }
    (alpha, cam)
}

/// Weighted mean position of voxels with `v > 0 && v >= threshold * max`.
/// `heat` is x-fastest with `dims = [w, h, d]`; returns `[x, y, z]`.
pub fn brute_centroid(heat: &[f64], dims: [usize; 3], threshold: f64) -> Option<[f64; 3]> {
    let max = heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut sx, mut sy, mut sz, mut t) = (0.0, 0.0, 0.0, 0.0);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let v = heat[(z * dims[1] + y) * dims[0] + x];
                if v > 0.0 && v >= threshold * max {
                    sx += v * x as f64;
                    sy += v * y as f64;
                    sz += v * z as f64;
                    t += v;
                }
            }
        }
    }
    (t > 0.0).then(|| [sx / t, sy / t, sz / t])
}

/// Largest 6-connected component of `fg` by breadth-first flood fill; the
/// component discovered first wins ties.
pub fn flood_largest(fg: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [w, h, d] = dims;
    let mut label = vec![0usize; fg.len()];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0;
        let mut q = VecDeque::from([start]);
        label[start] = next;
        while let Some(i) = q.pop_front() {
            size += 1;
            let (x, y, z) = (i % w, (i / w) % h, i / (w * h));
            let mut nb = Vec::new();
            if x > 0 { nb.push(i - 1) }
            if x + 1 < w { nb.push(i + 1) }
            if y > 0 { nb.push(i - w) }
            if y + 1 < h { nb.push(i + w) }
            if z > 0 { nb.push(i - w * h) }
            if z + 1 < d { nb.push(i + w * h) }
            for j in nb {
                if fg[j] && label[j] == 0 {
                    label[j] = next;
                    q.push_back(j);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// `(tp, fp, tn, fn)` by counting.
pub fn brute_counts(preds: &[u8], labels: &[u8]) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => c.0 += 1,
            (1, 0) => c.1 += 1,
            (0, 0) => c.2 += 1,
            _ => c.3 += 1,
        }
    }
    c
}

/// AUC by comparing every positive with every negative.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Adadelta on a scalar, written straight from the update rule.
pub fn adadelta_scalar(grads: &[f64], rho: f64, eps: f64) -> Vec<f64> {
    let (mut eg, mut ed) = (0.0, 0.0);
    grads
        .iter()
        .map(|&g| {
            eg = rho * eg + (1.0 - rho) * g * g;
            let dx = -((ed + eps).sqrt() / (eg + eps).sqrt()) * g;
            ed = rho * ed + (1.0 - rho) * dx * dx;
            dx
        })
        .collect()
}
