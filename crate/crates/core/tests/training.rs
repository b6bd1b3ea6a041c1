//! Optimizer arithmetic, schedule, averaging and end-to-end training behavior.

use std::collections::VecDeque;

use lightattn::attention::{AttentionConfig, Variant};
use lightattn::classifier::{evaluate, ModelConfig};
use lightattn::data::{generate, generate_synthetic, Dataset, SyntheticConfig, SyntheticTask};
use lightattn::encoder::EncoderConfig;
use lightattn::position::PositionConfig;
use lightattn::train::{adam_step, average_checkpoints, train, warmup_lr, TrainConfig, TrainState};
use lightattn::Tensor;
use rand::{Rng, SeedableRng};

#[test]
fn warmup_matches_closed_form_at_sampled_steps() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let step: u64 = rng.random_range(1..200_000);
        let warmup: u64 = rng.random_range(1..10_000);
        let d: usize = rng.random_range(1..2048);
        let s = step as f64;
        let expect = 1.0 / (d as f64).sqrt() * (1.0 / s.sqrt()).min(s / (warmup as f64).powf(1.5));
        let got = warmup_lr(step, d, warmup).unwrap();
        assert!((got - expect).abs() <= 1e-12, "step {step} warmup {warmup} d {d}");
    }
}

/// Adam on f(x) = x²/2 (gradient x), traced by hand.
#[test]
fn adam_three_steps_match_hand_trace() {
    let cfg = TrainConfig { beta1: 0.9, beta2: 0.98, epsilon: 1e-9, ..Default::default() };
    let lr = 0.1;
    let mut params = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
    let mut state = TrainState::new(&params, 10, 0);

    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut trace = Vec::new();
    for t in 1..=3 {
        let g = x;
        m = 0.9 * m + 0.1 * g;
        v = 0.98 * v + 0.02 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.98f64.powi(t));
        x -= lr * mh / (vh.sqrt() + 1e-9);
        trace.push(x);
    }
    // Step 1 moves by almost exactly lr.
    assert!((trace[0] - 0.9).abs() < 1e-9);

    for expect in trace {
        let g = vec![params[0].clone()];
        adam_step(&mut params, &g, &mut state, &cfg, lr).unwrap();
        assert!((params[0].data()[0] - expect).abs() <= 1e-12);
    }
    assert_eq!(state.step, 3);
}

#[test]
fn huge_epsilon_gives_vanishing_updates() {
    let cfg = TrainConfig { epsilon: 1e12, ..Default::default() };
    let mut params = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
    let before = params[0].clone();
    let mut state = TrainState::new(&params, 1, 0);
    let grads = vec![Tensor::from_vec(&[3], vec![5.0, -5.0, 1.0]).unwrap()];
    adam_step(&mut params, &grads, &mut state, &cfg, 1.0).unwrap();
    // |Δ| ≤ lr · |ĝ| / ε, plus one rounding of the parameter itself.
    for k in 0..3 {
        let bound = 1.0 * grads[0].data()[k].abs() / 1e12 + f64::EPSILON * before.data()[k].abs();
        assert!((params[0].data()[k] - before.data()[k]).abs() <= bound);
    }
}

#[test]
fn averaging_identical_snapshots_is_idempotent() {
    let snap = vec![Tensor::from_vec(&[2, 2], vec![0.1, -7.25, 3.0, 1e-3]).unwrap(), Tensor::from_vec(&[1], vec![42.0]).unwrap()];
    for k in 1..=10 {
        let buf: VecDeque<Vec<Tensor>> = std::iter::repeat_n(snap.clone(), k).collect();
        let avg = average_checkpoints(&buf).unwrap();
        for (a, s) in avg.iter().zip(&snap) {
            assert_eq!(a.data(), s.data(), "k={k}");
        }
    }
}

#[test]
fn partial_buffer_averages_what_is_present() {
    let cfg = TrainConfig { avg_last_k: 10, ..Default::default() };
    let mut p = vec![Tensor::from_vec(&[1], vec![0.0]).unwrap()];
    let mut st = TrainState::new(&p, cfg.avg_last_k, 0);
    let mut values = Vec::new();
    for _ in 0..3 {
        adam_step(&mut p, &[Tensor::from_vec(&[1], vec![1.0]).unwrap()], &mut st, &cfg, 0.5).unwrap();
        values.push(p[0].data()[0]);
    }
    let avg = average_checkpoints(&st.snapshots).unwrap();
    assert!((avg[0].data()[0] - values.iter().sum::<f64>() / 3.0).abs() < 1e-15);
}

fn toy_model(variant: Variant, n_intents: usize, n_speakers: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            n_layers: 2,
            attention: AttentionConfig { n_heads: 2, d_head: 4, window: Some(5), variant, ..Default::default() },
            d_ff: 16,
            dropout,
            position: PositionConfig::new(0),
            conv_channels: [2, 4],
            input_dim: 12,
            ..Default::default()
        },
        n_intents,
        n_speakers,
    }
}

fn toy_data(n: usize, seed: u64) -> Dataset {
    generate(&SyntheticConfig { input_dim: 12, ..SyntheticConfig::new(SyntheticTask::Speakerized, n, 4, 2, seed) }).unwrap()
}

#[test]
fn overfits_a_single_example() {
    let one = toy_data(4, 1).subset(&[0]);
    let cfg = TrainConfig { total_steps: 200, batch_size: 1, warmup_steps: 20, eval_each_epoch: false, ..Default::default() };
    let out = train(&one, None, &toy_model(Variant::Light, 4, 2, 0.0), &cfg).unwrap();
    let first_below = out.steps.iter().position(|s| s.train_loss < 0.01);
    assert!(first_below.is_some(), "final loss {}", out.steps.last().unwrap().train_loss);
}

#[test]
fn full_batch_loss_decreases_over_first_steps() {
    let four = toy_data(4, 2);
    let cfg = TrainConfig { total_steps: 10, batch_size: 4, warmup_steps: 1, lr_scale: 0.01, eval_each_epoch: false, ..Default::default() };
    let out = train(&four, None, &toy_model(Variant::Light, 4, 2, 0.0), &cfg).unwrap();
    let losses: Vec<f64> = out.steps.iter().map(|s| s.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn same_seed_same_trajectory() {
    let data = toy_data(24, 3);
    let cfg = TrainConfig { total_steps: 12, batch_size: 5, warmup_steps: 5, seed: 17, ..Default::default() };
    let mc = toy_model(Variant::RelativeDai, 4, 2, 0.1);
    let a = train(&data, None, &mc, &cfg).unwrap();
    let b = train(&data, None, &mc, &cfg).unwrap();
    let bits = |o: &lightattn::train::TrainOutcome| o.steps.iter().map(|s| s.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.model, b.model);
    let c = train(&data, None, &mc, &TrainConfig { seed: 18, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn one_epoch_record_per_epoch() {
    let data = toy_data(10, 4);
    // 10 utterances, batch 4 → 3 steps per epoch; 8 steps → epochs of 3, 3, 2.
    let cfg = TrainConfig { total_steps: 8, batch_size: 4, warmup_steps: 5, ..Default::default() };
    let out = train(&data, None, &toy_model(Variant::Absolute, 4, 2, 0.1), &cfg).unwrap();
    assert_eq!(out.epochs.len(), 3);
    assert_eq!(out.epochs.iter().map(|e| e.last_step).collect::<Vec<_>>(), vec![3, 6, 8]);
    assert_eq!(out.steps.iter().filter(|s| s.eval.is_some()).count(), 3);
    assert_eq!(out.steps.len(), 8);
}

#[test]
fn rejects_labels_beyond_the_model() {
    let data = toy_data(8, 5);
    let err = train(&data, None, &toy_model(Variant::Light, 3, 2, 0.0), &TrainConfig { total_steps: 1, ..Default::default() });
    assert!(matches!(err, Err(lightattn::Error::Data(_))));
}

/// Token identity alone decides the intent, so an encoder without any
/// position information solves it.
#[test]
fn presence_task_is_solvable_without_positions() {
    let data = generate(&SyntheticConfig { input_dim: 12, ..SyntheticConfig::new(SyntheticTask::Presence, 400, 4, 2, 6) }).unwrap();
    let (train_set, test_set) = (data.subset(&(0..300).collect::<Vec<_>>()), data.subset(&(300..400).collect::<Vec<_>>()));
    let mut mc = toy_model(Variant::Light, 4, 2, 0.0);
    mc.encoder.use_position = false;
    // The schedule peaks near d_model^-0.5 · warmup^-0.5, which is large for
    // an 8-wide model; scale it down.
    let cfg = TrainConfig { total_steps: 600, batch_size: 8, warmup_steps: 50, lr_scale: 0.3, eval_each_epoch: false, ..Default::default() };
    let out = train(&train_set, None, &mc, &cfg).unwrap();
    let m = evaluate(&out.model, &out.config, &test_set).unwrap();
    assert!(m.intent_accuracy > 0.9, "{m:?}");
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate_synthetic(SyntheticTask::Order, 30, 8, 4, 9).unwrap();
    let b = generate_synthetic(SyntheticTask::Order, 30, 8, 4, 9).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(SyntheticTask::Order, 30, 8, 4, 10).unwrap();
    assert_ne!(a, c);
}
