//! Naive reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use lightattn::attention::{AttentionConfig, AttentionWeights, HeadWeights, PositionInputs, Variant};
use lightattn::position::{self, OffsetRange, PositionConfig, PositionKind, LIGHT_DIM};
use lightattn::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Weights with every entry (position parameters included) uniform in `[-scale, scale]`.
pub fn random_weights(cfg: &AttentionConfig, rng: &mut impl Rng, scale: f64) -> AttentionWeights<Tensor> {
    let mut w = AttentionWeights::init(cfg, rng);
    w.for_each_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale)));
    w
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    assert_eq!(c, v.len());
    (0..r).map(|i| (0..c).map(|k| m.at(i, k) * v[k]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn col(t: &Tensor, j: usize) -> Vec<f64> {
    t.column(j)
}

/// Position term of the logit for query `i`, key `j`, computed pair by pair.
pub fn naive_position_logit(
    variant: Variant,
    i: usize,
    j: usize,
    len: usize,
    head: &HeadWeights<Tensor>,
    w: &AttentionWeights<Tensor>,
    cfg: &AttentionConfig,
    pcfg: &PositionConfig,
) -> f64 {
    let delta = i as i64 - j as i64;
    match variant {
        Variant::Absolute => 0.0,
        Variant::ConcatAbs => {
            let p = position::light_position(len, pcfg).unwrap().values;
            let qp = matvec(head.pos_query.as_ref().unwrap(), &col(&p, i));
            let kp = matvec(head.pos_key.as_ref().unwrap(), &col(&p, j));
            dot(&kp, &qp) / (LIGHT_DIM as f64).sqrt()
        }
        Variant::Light => {
            let pd = position::relative_position(delta, pcfg);
            let (kp, u) = match &w.shared {
                Some(s) => (&s.pos_key, &s.u),
                None => (head.pos_key.as_ref().unwrap(), head.pos_u.as_ref().unwrap()),
            };
            dot(&matvec(kp, &pd), u.data()) / (LIGHT_DIM as f64).sqrt()
        }
        Variant::RelativeDai => {
            let s = w.shared.as_ref().unwrap();
            let pd = position::sinusoidal_at(delta as f64, cfg.d_model(), pcfg.max_len as f64);
            let kp = matvec(&s.pos_key, &pd);
            (dot(&kp, s.u.data()) + dot(&kp, s.v.as_ref().unwrap().data())) / (cfg.d_head as f64).sqrt()
        }
    }
}

/// One head by explicit loops over (query, key) pairs. Returns `d_head × L`.
pub fn naive_head(
    x: &Tensor,
    head: &HeadWeights<Tensor>,
    w: &AttentionWeights<Tensor>,
    cfg: &AttentionConfig,
    pcfg: &PositionConfig,
) -> Vec<Vec<f64>> {
    let (d, len) = (x.shape()[0], x.shape()[1]);
    let input: Tensor = if cfg.variant == Variant::Absolute {
        let p = position::sinusoidal_position(len, d, pcfg.max_len).unwrap().values;
        Tensor::from_vec(&[d, len], x.data().iter().zip(p.data()).map(|(a, b)| a + b).collect()).unwrap()
    } else {
        x.clone()
    };
    let d_k = cfg.d_head as f64;
    let radius = cfg.window.map(|w| (w - 1) / 2);
    let mut out = vec![vec![0.0; len]; cfg.d_head];
    for i in 0..len {
        let q = matvec(&head.query, &col(&input, i));
        let keys: Vec<usize> = (0..len).filter(|&j| radius.is_none_or(|r| i.abs_diff(j) <= r)).collect();
        let logits: Vec<f64> = keys
            .iter()
            .map(|&j| {
                let k = matvec(&head.key, &col(&input, j));
                dot(&k, &q) / d_k.sqrt() + naive_position_logit(cfg.variant, i, j, len, head, w, cfg, pcfg)
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (&j, ej) in keys.iter().zip(&e) {
            let v = matvec(&head.value, &col(&input, j));
            for r in 0..cfg.d_head {
                out[r][i] += ej / z * v[r];
            }
        }
    }
    out
}

/// `W_out · concat(heads)` by loops. Returns `d_model × L` row-major.
pub fn naive_multi_head(x: &Tensor, w: &AttentionWeights<Tensor>, cfg: &AttentionConfig, pcfg: &PositionConfig) -> Vec<f64> {
    let len = x.shape()[1];
    let stacked: Vec<Vec<f64>> = w.heads.iter().flat_map(|h| naive_head(x, h, w, cfg, pcfg)).collect();
    let d_model = cfg.d_model();
    let mut out = vec![0.0; d_model * len];
    for r in 0..d_model {
        for t in 0..len {
            out[r * len + t] = (0..stacked.len()).map(|k| w.out.at(r, k) * stacked[k][t]).sum();
        }
    }
    out
}

/// Position inputs for `attention::multi_head`, built from the public position API.
pub fn position_inputs(tape: &mut Tape, len: usize, cfg: &AttentionConfig, pcfg: &PositionConfig) -> PositionInputs {
    let offsets = OffsetRange::for_sequence(len, cfg.window);
    match cfg.variant {
        Variant::Absolute => PositionInputs {
            absolute: Some(tape.constant(position::sinusoidal_position(len, cfg.d_model(), pcfg.max_len).unwrap().values)),
            relative: None,
        },
        Variant::ConcatAbs => PositionInputs {
            absolute: Some(tape.constant(position::light_position(len, pcfg).unwrap().values)),
            relative: None,
        },
        Variant::Light => PositionInputs {
            absolute: None,
            relative: Some((tape.constant(position::relative_table(PositionKind::Light, LIGHT_DIM, offsets, pcfg)), offsets)),
        },
        Variant::RelativeDai => PositionInputs {
            absolute: None,
            relative: Some((
                tape.constant(position::relative_table(PositionKind::Sinusoidal, cfg.d_model(), offsets, pcfg)),
                offsets,
            )),
        },
    }
}

/// Library multi-head attention output for frozen weights.
pub fn library_multi_head(x: &Tensor, w: &AttentionWeights<Tensor>, cfg: &AttentionConfig, pcfg: &PositionConfig) -> Tensor {
    let mut tape = Tape::new();
    let wv = w.map("attn", &mut |_, t| tape.constant(t.clone()));
    let xv = tape.constant(x.clone());
    let pos = position_inputs(&mut tape, x.shape()[1], cfg, pcfg);
    let out = lightattn::attention::multi_head(&mut tape, xv, &pos, &wv, cfg).unwrap();
    tape.value(out).clone()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
