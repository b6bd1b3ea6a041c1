//! Library attention, bias and convolution against explicit-loop references.

mod common;

use common::*;
use lightattn::attention::{relative_bias_vector, AttentionConfig, Variant};
use lightattn::ops;
use lightattn::position::{self, OffsetRange, PositionConfig, PositionKind, LIGHT_DIM};
use lightattn::{Tape, Tensor};
use rand::Rng;

fn instance_config(variant: Variant, window: Option<usize>, shared_position: bool) -> AttentionConfig {
    AttentionConfig { n_heads: 2, d_head: 3, window, variant, shared_position, banded: true }
}

#[test]
fn every_variant_matches_pairwise_loops() {
    let mut rng = rng(42);
    let pcfg = PositionConfig::new(12);
    for variant in Variant::ALL {
        let mut worst: f64 = 0.0;
        for instance in 0..50 {
            let len = rng.random_range(1..=8);
            let window = [None, Some(1), Some(3), Some(5)][instance % 4];
            let cfg = instance_config(variant, window, variant == Variant::Light && instance % 5 == 0);
            let w = random_weights(&cfg, &mut rng, 1.0);
            let x = random_tensor(&mut rng, &[cfg.d_model(), len], 1.0);
            let lib = library_multi_head(&x, &w, &cfg, &pcfg);
            let naive = naive_multi_head(&x, &w, &cfg, &pcfg);
            worst = worst.max(max_abs_diff(lib.data(), &naive));
        }
        assert!(worst < 1e-12, "{variant}: max abs diff {worst:e}");
    }
}

#[test]
fn windowed_band_equals_masked_full() {
    let mut rng = rng(7);
    let pcfg = PositionConfig::new(40);
    for variant in Variant::ALL {
        for &len in &[1, 2, 5, 9, 17] {
            for window in [1, 3, 5, 7] {
                let band = instance_config(variant, Some(window), false);
                let masked = AttentionConfig { banded: false, ..band.clone() };
                let w = random_weights(&band, &mut rng, 1.0);
                let x = random_tensor(&mut rng, &[band.d_model(), len], 1.5);
                let a = library_multi_head(&x, &w, &band, &pcfg);
                let b = library_multi_head(&x, &w, &masked, &pcfg);
                let diff = a.max_abs_diff(&b);
                assert!(diff < 1e-12, "{variant} L={len} w={window}: {diff:e}");
            }
        }
    }
}

#[test]
fn bias_vector_matches_pairwise_computation() {
    let mut rng = rng(3);
    let pcfg = PositionConfig::new(16);
    for len in [1usize, 4, 9] {
        for window in [None, Some(5)] {
            let offsets = OffsetRange::for_sequence(len, window);
            let kp = random_tensor(&mut rng, &[LIGHT_DIM, LIGHT_DIM], 1.0);
            let u = random_tensor(&mut rng, &[LIGHT_DIM], 1.0);
            let mut tape = Tape::new();
            let table = tape.constant(position::relative_table(PositionKind::Light, LIGHT_DIM, offsets, &pcfg));
            let (kv, uv) = (tape.constant(kp.clone()), tape.constant(u.clone()));
            let bias = relative_bias_vector(&mut tape, kv, uv, table, offsets, 1.0 / 6f64.sqrt()).unwrap();
            let b = tape.value(bias.values).data().to_vec();
            if window.is_some() {
                assert_eq!(b.len(), 5, "window 5 materializes exactly five offsets");
            }
            for i in 0..len {
                for j in 0..len {
                    let delta = i as i64 - j as i64;
                    let Some(slot) = offsets.index(delta) else { continue };
                    let p = position::relative_position(delta, &pcfg);
                    let mut pair = 0.0;
                    for r in 0..LIGHT_DIM {
                        let kpr: f64 = (0..LIGHT_DIM).map(|c| kp.at(r, c) * p[c]).sum();
                        pair += kpr * u.data()[r];
                    }
                    pair /= 6f64.sqrt();
                    assert!((b[slot] - pair).abs() <= 1e-15, "δ={delta}: {} vs {pair}", b[slot]);
                }
            }
        }
    }
}

#[test]
fn zero_u_gives_zero_bias() {
    let pcfg = PositionConfig::new(10);
    let offsets = OffsetRange::for_sequence(6, None);
    let mut tape = Tape::new();
    let table = tape.constant(position::relative_table(PositionKind::Light, LIGHT_DIM, offsets, &pcfg));
    let kp = tape.constant(Tensor::full(&[6, 6], 0.3));
    let u = tape.constant(Tensor::zeros(&[6]));
    let bias = relative_bias_vector(&mut tape, kp, u, table, offsets, 1.0).unwrap();
    assert!(tape.value(bias.values).data().iter().all(|&v| v == 0.0));
}

/// Concatenating `p` under `x` and applying block-diagonal `Q`, `K` with
/// per-block scaling reproduces the two-term concat logits.
#[test]
fn concat_attention_equals_block_diagonal_expansion() {
    let mut rng = rng(11);
    let pcfg = PositionConfig::new(10);
    let cfg = AttentionConfig { n_heads: 1, d_head: 4, window: None, variant: Variant::ConcatAbs, ..Default::default() };
    for len in [1usize, 3, 6] {
        let w = random_weights(&cfg, &mut rng, 1.0);
        let h = &w.heads[0];
        let x = random_tensor(&mut rng, &[4, len], 1.0);
        let p = position::light_position(len, &pcfg).unwrap().values;
        // Rows of the block matrices carry the scaling: content rows by d_k^{-1/4}, position rows by 6^{-1/4}.
        let (sc, sp) = (4f64.powf(-0.25), 6f64.powf(-0.25));
        let block = |c: &Tensor, pm: &Tensor| {
            let mut m = vec![0.0; 10 * 10];
            for r in 0..4 {
                for k in 0..4 {
                    m[r * 10 + k] = c.at(r, k) * sc;
                }
            }
            for r in 0..6 {
                for k in 0..6 {
                    m[(4 + r) * 10 + 4 + k] = pm.at(r, k) * sp;
                }
            }
            Tensor::from_vec(&[10, 10], m).unwrap()
        };
        let qb = block(&h.query, h.pos_query.as_ref().unwrap());
        let kb = block(&h.key, h.pos_key.as_ref().unwrap());
        let mut xin = vec![0.0; 10 * len];
        for t in 0..len {
            for r in 0..4 {
                xin[r * len + t] = x.at(r, t);
            }
            for r in 0..6 {
                xin[(4 + r) * len + t] = p.at(r, t);
            }
        }
        let xin = Tensor::from_vec(&[10, len], xin).unwrap();
        let logits = qb.matmul(&xin).unwrap().transpose().unwrap().matmul(&kb.matmul(&xin).unwrap()).unwrap();
        let a = ops::softmax_masked(&logits, None).unwrap();
        let expanded = h.value.matmul(&x).unwrap().matmul(&a.transpose().unwrap()).unwrap();
        let expanded = w.out.matmul(&expanded).unwrap();
        let lib = library_multi_head(&x, &w, &cfg, &pcfg);
        assert!(lib.max_abs_diff(&expanded) < 1e-12, "L={len}");
    }
}

#[test]
fn singleton_absolute_attention_returns_value() {
    let mut rng = rng(5);
    let pcfg = PositionConfig::new(10);
    let cfg = AttentionConfig { n_heads: 1, d_head: 4, window: None, variant: Variant::Absolute, ..Default::default() };
    let mut w = random_weights(&cfg, &mut rng, 1.0);
    w.out = Tensor::identity(4);
    let x = random_tensor(&mut rng, &[4, 1], 1.0);
    let p = position::sinusoidal_position(1, 4, 10).unwrap().values;
    let xin = Tensor::from_vec(&[4, 1], x.data().iter().zip(p.data()).map(|(a, b)| a + b).collect()).unwrap();
    let expect = w.heads[0].value.matmul(&xin).unwrap();
    assert!(library_multi_head(&x, &w, &cfg, &pcfg).max_abs_diff(&expect) < 1e-15);
}

#[test]
fn zeroed_position_parameters_reduce_to_content_attention() {
    let mut rng = rng(9);
    let pcfg = PositionConfig::new(10);
    let base = AttentionConfig { n_heads: 2, d_head: 2, window: None, variant: Variant::Light, ..Default::default() };
    let x = random_tensor(&mut rng, &[4, 5], 1.0);
    let mut reference = None;
    let mut shared_w = random_weights(&base.with_variant(Variant::RelativeDai), &mut rng, 1.0);
    shared_w.zero_position_params();
    for variant in [Variant::Light, Variant::RelativeDai, Variant::ConcatAbs] {
        let cfg = base.with_variant(variant);
        let mut w = random_weights(&cfg, &mut rng, 1.0);
        w.zero_position_params();
        for (h, src) in w.heads.iter_mut().zip(&shared_w.heads) {
            h.query = src.query.clone();
            h.key = src.key.clone();
            h.value = src.value.clone();
        }
        w.out = shared_w.out.clone();
        let out = library_multi_head(&x, &w, &cfg, &pcfg);
        match &reference {
            None => reference = Some(out),
            Some(r) => assert!(out.max_abs_diff(r) < 1e-14, "{variant}"),
        }
    }
}

#[test]
fn head_permutation_with_matching_out_blocks_is_invariant() {
    let mut rng = rng(13);
    let pcfg = PositionConfig::new(10);
    let cfg = AttentionConfig { n_heads: 2, d_head: 3, window: Some(3), variant: Variant::Light, ..Default::default() };
    let w = random_weights(&cfg, &mut rng, 1.0);
    let x = random_tensor(&mut rng, &[6, 7], 1.0);
    let mut swapped = w.clone();
    swapped.heads.swap(0, 1);
    let cols: Vec<usize> = (3..6).chain(0..3).collect();
    swapped.out = w.out.select_columns(&cols).unwrap();
    let a = library_multi_head(&x, &w, &cfg, &pcfg);
    let b = library_multi_head(&x, &swapped, &cfg, &pcfg);
    assert!(a.max_abs_diff(&b) < 1e-14);
}

fn naive_conv(input: &Tensor, kernel: &Tensor, stride: (usize, usize)) -> Tensor {
    let [c_in, h, w] = input.shape()[..] else { panic!() };
    let [c_out, _, kh, kw] = kernel.shape()[..] else { panic!() };
    let geo = |len: usize, k: usize, s: usize| {
        let out = len.div_ceil(s);
        let total = ((out - 1) * s + k).saturating_sub(len);
        (out, total / 2)
    };
    let (oh, ph) = geo(h, kh, stride.0);
    let (ow, pw) = geo(w, kw, stride.1);
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride.0 + dy) as i64 - ph as i64;
                            let ix = (x * stride.1 + dx) as i64 - pw as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let iv = input.data()[(ci * h + iy as usize) * w + ix as usize];
                            let kv = kernel.data()[((co * c_in + ci) * kh + dy) * kw + dx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(co * oh + y) * ow + x] = acc;
            }
        }
    }
    Tensor::from_vec(&[c_out, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = rng(17);
    for _ in 0..30 {
        let c_in = rng.random_range(1..3);
        let c_out = rng.random_range(1..4);
        let h = rng.random_range(1..12);
        let w = rng.random_range(1..12);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = (rng.random_range(1..3), rng.random_range(1..3));
        let input = random_tensor(&mut rng, &[c_in, h, w], 1.0);
        let kernel = random_tensor(&mut rng, &[c_out, c_in, k, k], 1.0);
        let lib = ops::conv2d(&input, &kernel, stride).unwrap();
        let naive = naive_conv(&input, &kernel, stride);
        assert_eq!(lib.shape(), naive.shape());
        assert!(lib.max_abs_diff(&naive) < 1e-12);
    }
}
