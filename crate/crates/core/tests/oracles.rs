//! Library kernels against the brute-force references in `common`.

mod common;

use common::*;
use gmgenet::gradcam::{channel_weights, compute_cam, extract_voi, hot_centroid, refine_mask, upsample_to_input, Heatmap, VoiParams};
use gmgenet::pipeline::{confusion_metrics, roc_auc, Confusion};
use gmgenet::{Grid3, Tape, Tensor};
use num_rational::Ratio;
use rand::Rng;

#[test]
fn conv3d_matches_nested_loops_on_fifty_configs() {
    let mut r = rng(101);
    for case in 0..50 {
        let n = r.gen_range(1..=2);
        let ci = r.gen_range(1..=3);
        let co = r.gen_range(1..=3);
        let k: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=3));
        let stride: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=2));
        let pad: [usize; 3] = std::array::from_fn(|a| r.gen_range(0..=k[a] / 2 + 1).min(k[a]));
        let dims: [usize; 3] = std::array::from_fn(|a| r.gen_range(k[a].max(2)..=6));
        let xs = [n, ci, dims[0], dims[1], dims[2]];
        let ws = [co, ci, k[0], k[1], k[2]];
        let x = uniform(&mut r, xs.iter().product(), -1.0, 1.0);
        let w = uniform(&mut r, ws.iter().product(), -1.0, 1.0);
        let b = uniform(&mut r, co, -0.5, 0.5);
        let with_bias = case % 2 == 0;
        let (want, wshape) = naive_conv3d(&x, xs, &w, ws, with_bias.then_some(&b[..]), stride, pad);

        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(Tensor::new(&xs, x).unwrap());
        let wv = tape.leaf(Tensor::new(&ws, w).unwrap());
        let bv = with_bias.then(|| tape.leaf(Tensor::new(&[co], b.clone()).unwrap()));
        let y = tape.conv3d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(tape.value(y).shape(), &wshape, "case {case}");
        let err = max_rel_err(tape.value(y).data(), &want);
        assert!(err < 1e-6, "case {case}: relative error {err}");
    }
}

#[test]
fn pooling_matches_window_scan_on_fifty_configs() {
    let mut r = rng(202);
    for case in 0..50 {
        let n = r.gen_range(1..=2);
        let c = r.gen_range(1..=3);
        let window: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=3));
        let stride: [usize; 3] = std::array::from_fn(|_| r.gen_range(1..=3));
        let dims: [usize; 3] = std::array::from_fn(|a| r.gen_range(window[a]..=7));
        let shape = [n, c, dims[0], dims[1], dims[2]];
        let x = uniform(&mut r, shape.iter().product(), -2.0, 2.0);
        for max in [true, false] {
            let (want, o) = naive_pool(&x, n * c, dims, window, stride, max);
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(Tensor::new(&shape, x.clone()).unwrap());
            let y = if max {
                tape.maxpool3d(xv, window, stride).unwrap()
            } else {
                tape.avgpool3d(xv, window, stride).unwrap()
            };
            assert_eq!(tape.value(y).shape(), &[n, c, o[0], o[1], o[2]], "case {case}");
            if max {
                assert_eq!(tape.value(y).data(), &want[..], "case {case}: max pooling is exact");
            } else {
                let err = max_rel_err(tape.value(y).data(), &want);
                assert!(err < 1e-12, "case {case}: {err}");
            }
        }
    }
}

#[test]
fn maxpool_reference_example() {
    let mut r = rng(7);
    let x = uniform(&mut r, 64, -1.0, 1.0);
    let (want, _) = naive_pool(&x, 1, [4, 4, 4], [2, 2, 2], [2, 2, 2], true);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(Tensor::new(&[1, 1, 4, 4, 4], x).unwrap());
    let y = tape.maxpool3d(xv, [2, 2, 2], [2, 2, 2]).unwrap();
    assert_eq!(tape.value(y).data(), &want[..]);
}

#[test]
fn grad_cam_weights_and_map_match_brute_force() {
    let mut r = rng(303);
    for case in 0..50 {
        let k = r.gen_range(1..=6);
        let [d, h, w] = [r.gen_range(1..=5), r.gen_range(1..=5), r.gen_range(1..=5)];
        let n = k * d * h * w;
        let acts = uniform(&mut r, n, -1.0, 2.0);
        let grads = uniform(&mut r, n, -1.0, 1.0);
        let (alpha, cam) = brute_cam(&acts, &grads, k, d, h, w);
        let a = Tensor::new(&[1, k, d, h, w], acts).unwrap();
        let got_alpha = channel_weights(&a, &grads).unwrap();
        assert!(max_rel_err(&got_alpha, &alpha) < 1e-6, "case {case}");
        let got = compute_cam(&a, &got_alpha).unwrap();
        assert_eq!(got.dims(), [w, h, d]);
        assert!(max_rel_err(got.data(), &cam) < 1e-6, "case {case}");
        assert!(got.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn scaled_activations_scale_raw_cam_but_not_heatmap_or_box() {
    let mut r = rng(404);
    for case in 0..20 {
        let (k, d, h, w) = (3, 4, 5, 6);
        let acts = uniform(&mut r, k * d * h * w, -1.0, 2.0);
        let alpha = uniform(&mut r, k, 0.1, 1.0);
        let lambda = r.gen_range(0.1..10.0);
        let a1 = Tensor::new(&[1, k, d, h, w], acts.clone()).unwrap();
        let a2 = Tensor::new(&[1, k, d, h, w], acts.iter().map(|v| v * lambda).collect()).unwrap();
        let c1 = compute_cam(&a1, &alpha).unwrap();
        let c2 = compute_cam(&a2, &alpha).unwrap();
        let scaled: Vec<f64> = c1.data().iter().map(|v| v * lambda).collect();
        assert!(max_rel_err(c2.data(), &scaled) < 1e-12, "case {case}");
        if c1.max() <= 0.0 {
            continue;
        }
        let h1 = upsample_to_input(&c1, [12, 10, 8]).unwrap();
        let h2 = upsample_to_input(&c2, [12, 10, 8]).unwrap();
        assert!(max_rel_err(h1.values.data(), h2.values.data()) < 1e-12);
        let vol = Grid3::filled([12, 10, 8], 0.5f32).unwrap();
        let p = VoiParams::default();
        let b1 = extract_voi(&h1, &vol, [4, 4, 4], &p).unwrap().0;
        let b2 = extract_voi(&h2, &vol, [4, 4, 4], &p).unwrap().0;
        assert_eq!(b1, b2, "case {case}");
    }
}

fn two_lobes(r: &mut rand_chacha::ChaCha8Rng, dims: [usize; 3]) -> Vec<f64> {
    let centers: Vec<[f64; 3]> = (0..2)
        .map(|_| std::array::from_fn(|a| r.gen_range(0.0..dims[a] as f64)))
        .collect();
    let amps = [1.0, r.gen_range(0.5..1.0)];
    let widths = [r.gen_range(1.0..3.0), r.gen_range(1.0..3.0)];
    let mut out = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                let v: f64 = (0..2)
                    .map(|l| {
                        let d2: f64 = (0..3).map(|a| (p[a] - centers[l][a]).powi(2)).sum();
                        amps[l] * (-d2 / (2.0 * widths[l] * widths[l])).exp()
                    })
                    .sum();
                out.push(v);
            }
        }
    }
    out
}

#[test]
fn voi_centroid_matches_weighted_mean_on_fifty_two_lobe_maps() {
    let mut r = rng(505);
    let params = VoiParams::default();
    for case in 0..50 {
        let dims = [r.gen_range(10..=20), r.gen_range(10..=20), r.gen_range(6..=12)];
        let target = [r.gen_range(2..=8), r.gen_range(2..=8), r.gen_range(2..=5)];
        let heat = two_lobes(&mut r, dims);
        let want = brute_centroid(&heat, dims, params.cam_threshold).unwrap();
        let g = Grid3::new(dims, heat).unwrap();
        let got = hot_centroid(&g, params.cam_threshold).unwrap();
        for a in 0..3 {
            assert!((got[a] - want[a]).abs() < 1e-9, "case {case}");
        }
        let hm = upsample_to_input(&g, dims).unwrap();
        let vol = Grid3::filled(dims, 0.5f32).unwrap();
        let (b, crop) = extract_voi(&hm, &vol, target, &params).unwrap();
        assert_eq!(b.extent(), target, "case {case}");
        assert_eq!(crop.dims(), target);
        let lo = b.origin();
        for a in 0..3 {
            let centre = lo[a] as f64 + (target[a] / 2) as f64;
            let clamped = lo[a] == 0 || lo[a] + target[a] == dims[a];
            if !clamped {
                assert!((centre - want[a]).abs() <= 0.5 + 1e-9, "case {case} axis {a}");
            }
        }
    }
}

#[test]
fn refine_mask_matches_flood_fill_on_random_bodies() {
    let mut r = rng(606);
    for case in 0..50 {
        let dims = [r.gen_range(3..=9), r.gen_range(3..=9), r.gen_range(3..=7)];
        let len = dims.iter().product();
        let body: Vec<f32> = (0..len).map(|_| if r.gen_bool(0.55) { r.gen_range(0.2..1.0) } else { 0.0 }).collect();
        if body.iter().all(|&v| v < 0.1) {
            continue;
        }
        let heat: Vec<f64> = uniform(&mut r, len, 0.0, 1.0);
        let keep = flood_largest(&body.iter().map(|&v| v >= 0.1).collect::<Vec<_>>(), dims);
        let hm = Heatmap {
            values: Grid3::new(dims, heat.clone()).unwrap(),
            source_shape: dims,
        };
        let out = refine_mask(&hm, &Grid3::new(dims, body).unwrap(), 0.1).unwrap();
        for i in 0..len {
            let want = if keep[i] { heat[i] } else { 0.0 };
            assert_eq!(out.values.data()[i], want, "case {case} voxel {i}");
        }
    }
}

#[test]
fn confusion_and_auc_match_counting_on_a_thousand_instances() {
    let mut r = rng(707);
    for case in 0..1000 {
        let n = r.gen_range(2..=30);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let preds: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
        // coarse grid so ties are common
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..8) as f64 / 8.0).collect();
        let (tp, fp, tn, fn_) = brute_counts(&preds, &labels);
        let m = confusion_metrics(&preds, &labels).unwrap();
        assert_eq!(m.counts, Confusion { tp, fp, tn, fn_ }, "case {case}");
        assert_eq!(m.accuracy, Ratio::new(tp + tn, n as u64));
        assert_eq!(m.sensitivity, Ratio::new(tp, tp + fn_));
        assert_eq!(m.specificity, Ratio::new(tn, tn + fp));
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        assert_eq!(auc, brute_auc(&scores, &labels), "case {case}");
    }
}

#[test]
fn auc_antisymmetry_without_ties() {
    let mut r = rng(808);
    for _ in 0..200 {
        let n = r.gen_range(2..=40);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|i| i as f64 + r.gen_range(0.0..0.5)).collect();
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let b = roc_auc(&scores, &flipped).unwrap().auc;
        assert!((a + b - 1.0).abs() < 1e-12);
    }
}
