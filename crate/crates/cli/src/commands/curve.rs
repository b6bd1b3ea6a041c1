use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use lightattn::attention::Variant;
use lightattn::classifier::ModelConfig;
use lightattn::data::split_blocks;
use lightattn::train::{train, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use super::ensure_dir;
use crate::config::ExperimentConfig;
use crate::report::CsvTable;

/// One trained-and-scored point of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub variant: Variant,
    pub fold: usize,
    pub n_train_blocks: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub intent_f1_micro: f64,
    pub intent_f1_macro: f64,
    pub speaker_acc: f64,
}

pub struct CurveReport {
    /// In (variant, fold, prefix) order.
    pub rows: Vec<CurveRow>,
    pub fold_seeds: Vec<u64>,
    pub csv: PathBuf,
}

impl CurveReport {
    /// Mean intent F1 over folds for each (variant, prefix).
    pub fn summary(&self) -> BTreeMap<(Variant, usize), f64> {
        let mut acc: BTreeMap<(Variant, usize), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry((r.variant, r.n_train_blocks)).or_default();
            e.0 += r.intent_f1_micro;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

#[derive(Serialize)]
struct CurveMeta<'a> {
    config_hash: &'a str,
    seed: u64,
    n_blocks: usize,
    n_folds: usize,
    fold_seeds: &'a [u64],
    fold_block_orders: &'a [Vec<usize>],
}

/// Trains every (variant, fold, prefix) combination on the prefix of the
/// fold's block order and scores it on all remaining blocks. Jobs run on
/// the current rayon pool; results are collected in job order, so output
/// does not depend on the thread count.
pub fn cmd_curve(cfg: &ExperimentConfig) -> Result<CurveReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let seed = cfg.seed();
    let (data, _) = cfg.load_data()?;
    let cc = &cfg.curve;
    let split = split_blocks(data.len(), cc.n_blocks, cc.n_folds, seed)?;
    if let Some(&bad) = cc.prefixes.iter().find(|&&k| k == 0 || k >= cc.n_blocks) {
        bail!("prefix of {bad} blocks must lie in 1..{}", cc.n_blocks);
    }

    let jobs: Vec<(Variant, usize, usize)> = cfg
        .variants
        .iter()
        .flat_map(|&v| (0..cc.n_folds).flat_map(move |f| cc.prefixes.iter().map(move |&k| (v, f, k))))
        .collect();
    log::info!("learning curve: {} jobs on {} threads", jobs.len(), rayon::current_num_threads());

    let rows = jobs
        .par_iter()
        .map(|&(variant, fold, k)| -> Result<CurveRow> {
            let train_set = data.subset(&split.train_indices(fold, k));
            let test_set = data.subset(&split.test_indices(fold, k));
            let model_cfg = ModelConfig {
                encoder: cfg.encoder.with_variant(variant),
                n_intents: data.n_intents,
                n_speakers: data.n_speakers,
            };
            // Every variant sees the same seed at a given (fold, prefix).
            let tc = TrainConfig {
                seed: seed ^ ((fold as u64) << 32 | k as u64),
                eval_each_epoch: false,
                ..cfg.train.clone()
            };
            let out = train(&train_set, Some(&test_set), &model_cfg, &tc)
                .with_context(|| format!("{variant} fold {fold} prefix {k}"))?;
            let m = out.final_metrics;
            log::info!("{variant} fold {fold} prefix {k}: intent F1 {:.3}", m.intent_f1_micro);
            Ok(CurveRow {
                variant,
                fold,
                n_train_blocks: k,
                n_train: train_set.len(),
                n_test: test_set.len(),
                intent_f1_micro: m.intent_f1_micro,
                intent_f1_macro: m.intent_f1_macro,
                speaker_acc: m.speaker_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let mut table = CsvTable::new(
        &hash,
        seed,
        &["kind", "variant", "fold", "n_train_blocks", "n_train", "n_test", "intent_f1_micro", "intent_f1_macro", "speaker_acc"],
    )?;
    for r in &rows {
        table.row([
            "fold".to_string(),
            r.variant.to_string(),
            r.fold.to_string(),
            r.n_train_blocks.to_string(),
            r.n_train.to_string(),
            r.n_test.to_string(),
            r.intent_f1_micro.to_string(),
            r.intent_f1_macro.to_string(),
            r.speaker_acc.to_string(),
        ])?;
    }
    for &variant in &cfg.variants {
        for &k in &cc.prefixes {
            let group: Vec<&CurveRow> = rows.iter().filter(|r| r.variant == variant && r.n_train_blocks == k).collect();
            let mean = |f: &dyn Fn(&CurveRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64;
            table.row([
                "mean".to_string(),
                variant.to_string(),
                String::new(),
                k.to_string(),
                mean(&|r| r.n_train as f64).to_string(),
                mean(&|r| r.n_test as f64).to_string(),
                mean(&|r| r.intent_f1_micro).to_string(),
                mean(&|r| r.intent_f1_macro).to_string(),
                mean(&|r| r.speaker_acc).to_string(),
            ])?;
        }
    }
    let csv = dir.join("learning_curve.csv");
    table.write(&csv)?;

    let meta = CurveMeta {
        config_hash: &hash,
        seed,
        n_blocks: cc.n_blocks,
        n_folds: cc.n_folds,
        fold_seeds: &split.fold_seeds,
        fold_block_orders: &split.fold_orders,
    };
    let meta_path = dir.join("learning_curve_meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", meta_path.display()))?;
    Ok(CurveReport { rows, fold_seeds: split.fold_seeds, csv })
}
