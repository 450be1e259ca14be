mod common;

use common::*;
use gmgenet::densenet::{build_model, DenseBlockConfig, Mode, Model, ModelConfig};
use gmgenet::{Error, Tape, Tensor};
use rand::Rng;

fn random_config(r: &mut rand_chacha::ChaCha8Rng, seed: u64) -> ModelConfig {
    let nblocks = r.gen_range(1..=3);
    let side = r.gen_range(6..=12);
    let blocks: Vec<DenseBlockConfig> = (0..nblocks)
        .map(|_| DenseBlockConfig::new(r.gen_range(1..=3), r.gen_range(1..=4)))
        .collect();
    let mut transitions: Vec<bool> = (0..nblocks).map(|_| r.gen_bool(0.5)).collect();
    *transitions.last_mut().unwrap() = false;
    ModelConfig {
        input_shape: [r.gen_range(1..=2), side, side, side],
        initial_channels: r.gen_range(1..=5),
        initial_stride: [1; 3],
        blocks,
        transitions,
        ..ModelConfig::desk([1, 8, 8, 8], seed)
    }
}

fn batch(seed: u64, cfg: &ModelConfig, n: usize) -> Tensor<f64> {
    let [c, d, h, w] = cfg.input_shape;
    let mut r = rng(seed);
    Tensor::new(&[n, c, d, h, w], uniform(&mut r, n * c * d * h * w, 0.0, 1.0)).unwrap()
}

#[test]
fn dense_block_channels_on_twenty_random_configs() {
    let mut r = rng(1);
    for case in 0..20 {
        let cfg = random_config(&mut r, case);
        let mut model = build_model::<f64>(&cfg).unwrap();
        let plan = model.plan().clone();
        for (i, (bp, bc)) in plan.blocks.iter().zip(&cfg.blocks).enumerate() {
            assert_eq!(bp.out_channels, bp.in_channels + bc.num_layers * bc.growth_rate, "case {case} block {i}");

            let [d, h, w] = bp.spatial;
            let x = Tensor::new(&[2, bp.in_channels, d, h, w], uniform(&mut r, 2 * bp.in_channels * d * h * w, -1.0, 1.0))
                .unwrap();
            let mut tape = Tape::new();
            let vars = model.register_params(&mut tape);
            let xv = tape.constant(x);
            let out = model.dense_block_forward(&mut tape, &vars, i, xv).unwrap();
            assert_eq!(tape.value(out.output).shape(), &[2, bp.out_channels, d, h, w], "case {case}");
            for (l, inp) in out.layer_inputs.iter().enumerate() {
                assert_eq!(tape.value(*inp).shape()[1], bp.in_channels + l * bc.growth_rate);
            }
        }
    }
}

#[test]
fn build_is_byte_deterministic() {
    let mut r = rng(2);
    for case in 0..5 {
        let cfg = random_config(&mut r, 40 + case);
        let a = build_model::<f64>(&cfg).unwrap().to_bytes();
        let b = build_model::<f64>(&cfg).unwrap().to_bytes();
        assert_eq!(a, b);
        let other = build_model::<f64>(&ModelConfig { seed: cfg.seed + 1, ..cfg.clone() }).unwrap().to_bytes();
        assert_ne!(a, other);
    }
}

#[test]
fn every_parameter_gets_a_gradient() {
    let cfg = ModelConfig::desk([1, 16, 16, 16], 3);
    let mut model = build_model::<f64>(&cfg).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(batch(4, &cfg, 4));
    let out = model.forward(&mut tape, x).unwrap();
    let loss = tape.bce_loss(out.probs, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    tape.backward(loss).unwrap();
    for (i, p) in out.params.iter().enumerate() {
        let g = tape.grad(*p).expect("parameter tracked");
        assert!(g.iter().any(|v| *v != 0.0), "parameter {i} has an all-zero gradient");
    }
}

#[test]
fn eval_forward_is_pure_and_repeatable() {
    let cfg = ModelConfig::desk([1, 16, 16, 16], 5);
    let mut model = build_model::<f64>(&cfg).unwrap();
    model.set_mode(Mode::Eval);
    let snapshot: Model<f64> = model.clone();
    let x = batch(6, &cfg, 3);
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, snapshot);
    assert_eq!(a.len(), 3);
    assert!(a.iter().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let cfg = ModelConfig::desk([1, 16, 16, 16], 5);
    let model = build_model::<f64>(&cfg).unwrap();
    let bad = Tensor::zeros(&[1, 1, 16, 16, 15]).unwrap();
    assert!(matches!(model.predict(&bad), Err(Error::Dimension(_))));
}

#[test]
fn zeroed_first_layer_changes_only_its_channel_slice() {
    let cfg = ModelConfig {
        initial_channels: 5,
        initial_stride: [1; 3],
        blocks: vec![DenseBlockConfig::new(3, 2)],
        transitions: vec![false],
        ..ModelConfig::desk([1, 6, 6, 6], 9)
    };
    let mut model = build_model::<f64>(&cfg).unwrap();
    model.set_mode(Mode::Eval);
    let mut ablated = model.clone();
    // layer 1 of the block is the only conv with weight shape [2, 5, 3, 3, 3]
    let idx = ablated
        .params()
        .iter()
        .position(|p| p.shape() == [2, 5, 3, 3, 3])
        .expect("layer 1 conv weight");
    ablated.params_mut()[idx].data_mut().iter_mut().for_each(|v| *v = 0.0);

    let mut r = rng(10);
    let x = Tensor::new(&[2, 5, 6, 6, 6], uniform(&mut r, 2 * 5 * 216, -1.0, 1.0)).unwrap();
    let run = |m: &mut Model<f64>| {
        let mut tape = Tape::new();
        let vars = m.register_params(&mut tape);
        let xv = tape.constant(x.clone());
        let out = m.dense_block_forward(&mut tape, &vars, 0, xv).unwrap();
        out.layer_inputs
            .iter()
            .map(|v| tape.value(*v).clone())
            .collect::<Vec<_>>()
    };
    let base = run(&mut model);
    let abl = run(&mut ablated);
    let spatial = 216;
    for l in 1..3 {
        let c = base[l].shape()[1];
        for n in 0..2 {
            for ch in 0..c {
                let s = |t: &Tensor<f64>| t.data()[(n * c + ch) * spatial..][..spatial].to_vec();
                let same = s(&base[l]) == s(&abl[l]);
                let in_slice = (5..7).contains(&ch);
                // channels after the slice come from later layers, which see the change
                if ch < 7 {
                    assert_eq!(same, !in_slice, "layer {l} sample {n} channel {ch}");
                }
            }
        }
    }
    // the ablated slice is exactly zero in layer 2's input
    for n in 0..2 {
        let c = abl[1].shape()[1];
        assert!(abl[1].data()[(n * c + 5) * spatial..(n * c + 7) * spatial].iter().all(|v| *v == 0.0));
    }
}
