use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use lightattn::checkpoint::save_checkpoint;
use lightattn::classifier::ModelConfig;
use lightattn::data::Dataset;
use lightattn::metrics::Metrics;
use lightattn::train::{train, TrainOutcome};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ensure_dir;
use crate::config::ExperimentConfig;
use crate::report::{opt, CsvTable};

pub struct TrainReport {
    pub outcome: TrainOutcome,
    pub metrics_csv: PathBuf,
    pub epoch_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub summary: PathBuf,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    seed: u64,
    variant: &'a str,
    n_train: usize,
    n_eval: usize,
    n_parameters: usize,
    steps: u64,
    final_metrics: Metrics,
    wall_clock_secs: f64,
    accuracy_threshold: f64,
    /// Seconds until the first epoch whose eval intent accuracy reached the
    /// threshold; absent when it never did or per-epoch eval is off.
    secs_to_threshold: Option<f64>,
}

/// Deterministic hold-out split of a single source.
fn hold_out(data: &Dataset, fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((data.len() as f64) * fraction).round() as usize;
    let n_eval = n_eval.min(data.len().saturating_sub(1));
    let (eval, train) = order.split_at(n_eval);
    (data.subset(train), data.subset(eval))
}

/// Trains one model and writes `metrics.csv` (one row per step),
/// `epoch_metrics.csv`, `model.ckpt` and `summary.json`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let seed = cfg.seed();
    let (data, eval) = cfg.load_data()?;
    let (train_set, eval_set) = match eval {
        Some(e) => (data, e),
        None if cfg.eval_fraction > 0.0 => hold_out(&data, cfg.eval_fraction, seed),
        None => (data.clone(), data),
    };
    let model_cfg = ModelConfig {
        encoder: cfg.encoder.clone(),
        n_intents: train_set.n_intents.max(eval_set.n_intents),
        n_speakers: train_set.n_speakers.max(eval_set.n_speakers),
    };

    let started = Instant::now();
    let outcome = train(&train_set, Some(&eval_set), &model_cfg, &cfg.train)?;
    let wall_clock_secs = started.elapsed().as_secs_f64();

    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let mut steps = CsvTable::new(
        &hash,
        seed,
        &["step", "epoch", "lr", "train_loss", "intent_f1_micro", "intent_f1_macro", "speaker_acc"],
    )?;
    for s in &outcome.steps {
        steps.row([
            s.step.to_string(),
            s.epoch.to_string(),
            s.lr.to_string(),
            s.train_loss.to_string(),
            opt(s.eval.map(|m| m.intent_f1_micro)),
            opt(s.eval.map(|m| m.intent_f1_macro)),
            opt(s.eval.map(|m| m.speaker_accuracy)),
        ])?;
    }
    let metrics_csv = dir.join("metrics.csv");
    steps.write(&metrics_csv)?;

    let mut epochs = CsvTable::new(
        &hash,
        seed,
        &["epoch", "last_step", "mean_train_loss", "intent_f1_micro", "intent_f1_macro", "intent_acc", "speaker_acc"],
    )?;
    for e in &outcome.epochs {
        epochs.row([
            e.epoch.to_string(),
            e.last_step.to_string(),
            e.mean_train_loss.to_string(),
            opt(e.metrics.map(|m| m.intent_f1_micro)),
            opt(e.metrics.map(|m| m.intent_f1_macro)),
            opt(e.metrics.map(|m| m.intent_accuracy)),
            opt(e.metrics.map(|m| m.speaker_accuracy)),
        ])?;
    }
    let epoch_csv = dir.join("epoch_metrics.csv");
    epochs.write(&epoch_csv)?;

    let checkpoint = dir.join("model.ckpt");
    save_checkpoint(&checkpoint, &outcome.config, &outcome.model)?;

    let secs_to_threshold = outcome
        .epochs
        .iter()
        .find(|e| e.metrics.is_some_and(|m| m.intent_accuracy >= cfg.accuracy_threshold))
        .map(|e| e.elapsed_secs);
    let summary = Summary {
        config_hash: &hash,
        seed,
        variant: cfg.encoder.attention.variant.name(),
        n_train: train_set.len(),
        n_eval: eval_set.len(),
        n_parameters: outcome.model.num_parameters(),
        steps: cfg.train.total_steps,
        final_metrics: outcome.final_metrics,
        wall_clock_secs,
        accuracy_threshold: cfg.accuracy_threshold,
        secs_to_threshold,
    };
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    log::info!(
        "trained {} steps in {wall_clock_secs:.1}s: intent F1 {:.3}, speaker acc {:.3}",
        cfg.train.total_steps,
        outcome.final_metrics.intent_f1_micro,
        outcome.final_metrics.speaker_accuracy
    );
    Ok(TrainReport { outcome, metrics_csv, epoch_csv, checkpoint, summary: summary_path })
}
