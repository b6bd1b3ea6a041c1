//! The training recipe: Adam with bias correction, inverse-square-root
//! warmup, minibatch training and averaging of the last `k` snapshots.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate, utterance_loss, ModelConfig, SluModel};
use crate::data::Dataset;
use crate::encoder::ForwardMode;
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// When a parameter snapshot enters the averaging buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotEvery {
    Step,
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Number of trailing snapshots averaged into the final model.
    pub avg_last_k: usize,
    pub snapshot_every: SnapshotEvery,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    /// Evaluate after every epoch (otherwise only the final model is scored).
    pub eval_each_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            warmup_steps: 4000,
            total_steps: 1000,
            batch_size: 16,
            avg_last_k: 10,
            snapshot_every: SnapshotEvery::Step,
            lr_scale: 1.0,
            eval_each_epoch: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::param(format!("betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2)));
        }
        if !(self.epsilon > 0.0) || !(self.lr_scale > 0.0) || !self.lr_scale.is_finite() {
            return Err(Error::param("epsilon and lr_scale must be positive"));
        }
        if self.warmup_steps < 1 || self.avg_last_k < 1 || self.batch_size < 1 || self.total_steps < 1 {
            return Err(Error::param("warmup_steps, avg_last_k, batch_size and total_steps must be at least 1"));
        }
        Ok(())
    }
}

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn warmup_lr(step: u64, d_model: usize, warmup_steps: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::contract("learning-rate steps are counted from 1"));
    }
    if warmup_steps == 0 || d_model == 0 {
        return Err(Error::param("warmup_steps and d_model must be positive"));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup_steps as f64).powf(-1.5)))
}

/// Optimizer moments, the snapshot ring buffer and the data-order RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub snapshots: VecDeque<Vec<Tensor>>,
    pub capacity: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: &[Tensor], capacity: usize, seed: u64) -> Self {
        TrainState {
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            snapshots: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push_snapshot(&mut self, params: &[Tensor]) {
        if self.snapshots.len() == self.capacity {
            self.snapshots.pop_front();
        }
        self.snapshots.push_back(params.iter().map(|p| Tensor::from_parts(p.shape().to_vec(), p.data().to_vec())).collect());
    }
}

/// One Adam update with bias correction. Pushes a snapshot when the
/// configuration snapshots every step.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut TrainState, cfg: &TrainConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::contract(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.len() != state.first_moment[i].len() {
            return Err(Error::contract(format!("parameter {i}: shape {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first_moment[i], &mut state.second_moment[i]);
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.epsilon);
        }
    }
    if cfg.snapshot_every == SnapshotEvery::Step {
        state.push_snapshot(params);
    }
    Ok(())
}

/// Element-wise mean of the buffered snapshots.
///
/// Accumulates offsets from the oldest snapshot rather than raw values, so
/// averaging identical snapshots returns them bit for bit.
pub fn average_checkpoints(snapshots: &VecDeque<Vec<Tensor>>) -> Result<Vec<Tensor>> {
    let first = snapshots.front().ok_or_else(|| Error::contract("no snapshots to average"))?;
    let n = snapshots.len() as f64;
    let mut sums: Vec<Vec<f64>> = first.iter().map(|t| vec![0.0; t.len()]).collect();
    for snap in snapshots {
        if snap.len() != first.len() {
            return Err(Error::contract("snapshots hold different parameter counts"));
        }
        for ((acc, t), base) in sums.iter_mut().zip(snap).zip(first) {
            if acc.len() != t.len() {
                return Err(Error::contract("snapshot shapes disagree"));
            }
            for ((a, &x), &b) in acc.iter_mut().zip(t.data()).zip(base.data()) {
                *a += x - b;
            }
        }
    }
    Ok(first
        .iter()
        .zip(sums)
        .map(|(t, s)| {
            let data = t.data().iter().zip(s).map(|(&b, d)| b + d / n).collect();
            Tensor::from_parts(t.shape().to_vec(), data)
        })
        .collect())
}

/// Parameters of a model in traversal order.
pub fn flatten(model: &SluModel<Tensor>) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.map(&mut |_, t| out.push(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())));
    out
}

/// Inverse of [`flatten`].
pub fn unflatten(model: &mut SluModel<Tensor>, params: &[Tensor]) -> Result<()> {
    let mut i = 0;
    let mut bad: Option<String> = None;
    model.for_each_mut(&mut |name, t| {
        match params.get(i) {
            Some(p) if p.shape() == t.shape() => t.data_mut().copy_from_slice(p.data()),
            _ => {
                bad.get_or_insert_with(|| name.to_string());
            }
        }
        i += 1;
    });
    if bad.is_none() && i != params.len() {
        bad = Some(format!("{} surplus tensors", params.len() - i));
    }
    if let Some(at) = bad {
        return Err(Error::contract(format!("parameter list does not match the model at {at}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Present on the last step of each evaluated epoch.
    pub eval: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub last_step: u64,
    pub mean_train_loss: f64,
    pub metrics: Option<Metrics>,
    /// Wall-clock seconds since training started. Not deterministic.
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// `T` resolved against the data when it was left at 0.
    pub config: ModelConfig,
    /// Checkpoint-averaged weights.
    pub model: SluModel<Tensor>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Metrics of the averaged model on the evaluation set.
    pub final_metrics: Metrics,
}

/// Minibatch training. Epochs visit the training set in a freshly shuffled
/// order; metrics are computed on `eval` (or the training set when `None`).
/// The whole trajectory is a function of the inputs and `cfg.seed`.
pub fn train(train_set: &Dataset, eval: Option<&Dataset>, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let eval_set = eval.unwrap_or(train_set);
    let mut model_cfg = model_cfg.clone();
    model_cfg.encoder.resolve_max_len(train_set.max_frames().max(eval_set.max_frames()));
    model_cfg.validate()?;
    for ds in [train_set, eval_set] {
        if ds.n_intents > model_cfg.n_intents || ds.n_speakers > model_cfg.n_speakers {
            return Err(Error::Data("dataset declares more classes than the model has".into()));
        }
        ds.validate()?;
    }

    let started = Instant::now();
    let mut model = SluModel::init(&model_cfg, cfg.seed)?;
    let mut params = flatten(&model);
    let mut state = TrainState::new(&params, cfg.avg_last_k, cfg.seed.wrapping_add(1));
    let d_model = model_cfg.encoder.d_model();

    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(cfg.total_steps as usize);
    let mut epochs = Vec::new();
    let mut epoch_loss = 0.0;
    let mut epoch_steps = 0usize;

    for step in 1..=cfg.total_steps {
        let epoch = ((step - 1) as usize) / batches_per_epoch;
        let slot = ((step - 1) as usize) % batches_per_epoch;
        if slot == 0 {
            order.shuffle(&mut state.rng);
        }
        let batch = &order[slot * cfg.batch_size..((slot + 1) * cfg.batch_size).min(n)];

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut total = None;
        for &i in batch {
            let mut mode = ForwardMode::train(&mut state.rng);
            // Inputs are validated, so non-finite intermediates mean the weights blew up.
            let l = utterance_loss(&mut tape, &bound, &model_cfg, &train_set.utterances[i], &mut mode).map_err(|e| match e {
                Error::Domain(detail) => Error::Divergence { step, detail },
                e => e,
            })?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("batches are never empty");
        let loss = tape.scale(total, 1.0 / batch.len() as f64);
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss is {loss_value}") });
        }
        let grads = tape.backward(loss)?;
        let mut grad_list = Vec::with_capacity(params.len());
        bound.map(&mut |_, v| grad_list.push(grads.wrt(*v)));
        drop(tape);

        let lr = cfg.lr_scale * warmup_lr(step, d_model, cfg.warmup_steps)?;
        adam_step(&mut params, &grad_list, &mut state, cfg, lr)?;
        if params.iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step, detail: "parameters became non-finite".into() });
        }
        unflatten(&mut model, &params)?;

        epoch_loss += loss_value;
        epoch_steps += 1;
        steps.push(StepRecord { step, epoch, lr, train_loss: loss_value, eval: None });

        if slot + 1 == batches_per_epoch || step == cfg.total_steps {
            if cfg.snapshot_every == SnapshotEvery::Epoch {
                state.push_snapshot(&params);
            }
            let metrics = if cfg.eval_each_epoch { Some(evaluate(&model, &model_cfg, eval_set)?) } else { None };
            steps.last_mut().expect("just pushed").eval = metrics;
            epochs.push(EpochRecord {
                epoch,
                last_step: step,
                mean_train_loss: epoch_loss / epoch_steps as f64,
                metrics,
                elapsed_secs: started.elapsed().as_secs_f64(),
            });
            log::info!("epoch {epoch} step {step} loss {:.4}", epoch_loss / epoch_steps as f64);
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
    }

    let averaged = average_checkpoints(&state.snapshots)?;
    unflatten(&mut model, &averaged)?;
    let final_metrics = evaluate(&model, &model_cfg, eval_set)?;
    Ok(TrainOutcome { config: model_cfg, model, steps, epochs, final_metrics })
}
