//! Encoder-level behavior: shapes, permutation control, determinism, layer statistics.

mod common;

use common::*;
use lightattn::attention::{AttentionConfig, Variant};
use lightattn::encoder::{self, layer_stack, sequence_positions, Encoder, EncoderConfig, ForwardMode};
use lightattn::position::PositionConfig;
use lightattn::{Tape, Tensor};

fn small(variant: Variant, window: Option<usize>) -> EncoderConfig {
    EncoderConfig {
        n_layers: 2,
        attention: AttentionConfig { n_heads: 2, d_head: 4, window, variant, ..Default::default() },
        d_ff: 16,
        position: PositionConfig::new(60),
        conv_channels: [2, 3],
        input_dim: 8,
        ..Default::default()
    }
}

#[test]
fn output_length_is_ceil_quarter_for_all_short_inputs() {
    let enc = Encoder::new(small(Variant::Light, Some(5)), 1).unwrap();
    let mut r = rng(2);
    for len in 1..=200 {
        let x = random_tensor(&mut r, &[8, len], 1.0);
        let out = enc.forward(&x).unwrap();
        assert_eq!(out.shape(), &[8 + 6, len.div_ceil(4)], "L={len}");
    }
}

/// With every position input and parameter zeroed and no window, the layer
/// stack commutes with column permutations.
#[test]
fn zero_position_stack_is_permutation_equivariant() {
    for variant in Variant::ALL {
        let mut cfg = small(variant, None);
        cfg.use_position = false;
        let mut w = encoder::init_weights(&cfg, 3);
        for layer in &mut w.layers {
            layer.attention.zero_position_params();
        }
        let mut r = rng(4);
        let len = 9;
        let x = random_tensor(&mut r, &[8, len], 1.0);
        let perm = [4, 0, 7, 2, 8, 1, 3, 6, 5];
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let wv = w.bind_frozen(&mut tape);
            let xv = tape.constant(input.clone());
            let mut mode = ForwardMode::eval();
            let pos = sequence_positions(&mut tape, len, &cfg, &mut mode).unwrap();
            let out = layer_stack(&mut tape, xv, &pos.inputs, &wv, &cfg, &mut mode).unwrap();
            tape.value(out).clone()
        };
        let permuted_then_run = run(&x.select_columns(&perm).unwrap());
        let run_then_permuted = run(&x).select_columns(&perm).unwrap();
        let dev = permuted_then_run.max_abs_diff(&run_then_permuted);
        assert!(dev < 1e-10, "{variant}: {dev:e}");
    }
}

#[test]
fn eval_mode_is_bit_identical_across_runs() {
    for variant in Variant::ALL {
        let enc = Encoder::new(small(variant, Some(5)), 9).unwrap();
        let again = Encoder::new(small(variant, Some(5)), 9).unwrap();
        let x = random_tensor(&mut rng(10), &[8, 37], 1.0);
        let (a, b) = (enc.forward(&x).unwrap(), again.forward(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn different_seeds_give_different_weights() {
    let cfg = small(Variant::Light, Some(5));
    assert_ne!(encoder::init_weights(&cfg, 1), encoder::init_weights(&cfg, 2));
    let w = encoder::init_weights(&cfg, 1);
    assert!(w.layers.iter().all(|l| l.ln1_gamma.data().iter().chain(l.ln2_gamma.data()).all(|&g| g == 1.0)));
}

#[test]
fn layer_outputs_have_normalized_columns() {
    let enc = Encoder::new(small(Variant::Light, Some(5)), 5).unwrap();
    let out = enc.forward(&random_tensor(&mut rng(6), &[8, 50], 2.0)).unwrap();
    let (rows, cols) = out.dims2().unwrap();
    let d_model = rows - 6;
    let mean_abs: f64 = (0..cols)
        .map(|c| ((0..d_model).map(|r| out.at(r, c)).sum::<f64>() / d_model as f64).abs())
        .sum::<f64>()
        / cols as f64;
    assert!(mean_abs < 1e-8, "{mean_abs:e}");
}

#[test]
fn zero_sublayers_reduce_to_double_layer_norm() {
    let mut cfg = small(Variant::Absolute, None);
    cfg.n_layers = 1;
    let mut w = encoder::init_weights(&cfg, 8);
    let layer = &mut w.layers[0];
    for t in [&mut layer.ff1, &mut layer.ff2, &mut layer.attention.out] {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = random_tensor(&mut rng(9), &[8, 5], 1.0);
    let mut tape = Tape::new();
    let wv = w.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let mut mode = ForwardMode::eval();
    let pos = sequence_positions(&mut tape, 5, &cfg, &mut mode).unwrap();
    let out = layer_stack(&mut tape, xv, &pos.inputs, &wv, &cfg, &mut mode).unwrap();
    let ones = Tensor::full(&[8], 1.0);
    let zeros = Tensor::zeros(&[8]);
    let once = lightattn::ops::layer_norm(&x, &ones, &zeros, 1e-5).unwrap();
    let twice = lightattn::ops::layer_norm(&once, &ones, &zeros, 1e-5).unwrap();
    assert!(tape.value(out).max_abs_diff(&twice) < 1e-12);
}

#[test]
fn layer_length_mismatch_is_dimension_error() {
    let cfg = small(Variant::Absolute, None);
    let w = encoder::init_weights(&cfg, 1);
    let mut tape = Tape::new();
    let wv = w.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::zeros(&[8, 4]));
    let mut mode = ForwardMode::eval();
    let pos = sequence_positions(&mut tape, 5, &cfg, &mut mode).unwrap();
    let err = encoder::encoder_layer(&mut tape, x, &pos.inputs, wv.layer(0), &cfg, &mut mode).unwrap_err();
    assert!(matches!(err, lightattn::Error::Dimension(_)));
}

#[test]
fn shared_weights_receive_gradient_from_every_layer() {
    let cfg = small(Variant::Light, Some(3));
    let w = encoder::init_weights(&cfg, 12);
    assert_eq!(w.layers.len(), 1);
    let one = EncoderConfig { n_layers: 1, ..cfg.clone() };
    let x = random_tensor(&mut rng(13), &[8, 12], 1.0);
    let grad_norm = |c: &EncoderConfig| {
        let mut tape = Tape::new();
        let wv = w.bind(&mut tape);
        let f = tape.constant(x.clone());
        let out = encoder::encode(&mut tape, f, c, &wv, &mut ForwardMode::eval()).unwrap();
        // Column sums of a layer-normed output are constant, so project
        // onto random weights instead of summing.
        let shape = tape.shape(out).to_vec();
        let r = tape.constant(random_tensor(&mut rng(14), &shape, 1.0));
        let prod = tape.mul(out, r).unwrap();
        let s = tape.sum(prod);
        let g = tape.backward(s).unwrap();
        g.wrt(wv.layers[0].ff1).data().to_vec()
    };
    // A second application of the same weights contributes a different gradient.
    assert!(max_abs_diff(&grad_norm(&cfg), &grad_norm(&one)) > 1e-9);
}
