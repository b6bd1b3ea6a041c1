use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use lightattn::attention::{multi_head, AttentionConfig, AttentionWeights, Variant};
use lightattn::encoder::{sequence_positions, EncoderConfig, ForwardMode};
use lightattn::position::PositionConfig;
use lightattn::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ensure_dir;
use crate::config::ExperimentConfig;
use crate::report::CsvTable;
use crate::AssertionFailure;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    /// `None` for full attention.
    pub window: Option<usize>,
    pub length: usize,
    pub heads: usize,
    pub batch: usize,
    pub score_elements: usize,
    pub expected: usize,
    pub wall_secs: f64,
}

pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub csv: PathBuf,
}

/// Score elements and time for one attention forward over a batch.
fn measure(variant: Variant, window: Option<usize>, length: usize, heads: usize, d_head: usize, batch: usize, seed: u64) -> Result<(usize, f64)> {
    let attention = AttentionConfig { n_heads: heads, d_head, window, variant, banded: true, ..Default::default() };
    let cfg = EncoderConfig {
        attention,
        dropout: 0.0,
        position: PositionConfig::new(length.max(5)),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = AttentionWeights::init(&cfg.attention, &mut rng);
    let d_model = cfg.d_model();

    let started = Instant::now();
    let mut tape = Tape::new();
    let w = weights.map("a", &mut |_, t| tape.constant(t.clone()));
    let pos = sequence_positions(&mut tape, length, &cfg, &mut ForwardMode::eval())?;
    for _ in 0..batch {
        let x = Tensor::from_fn(&[d_model, length], |_| rng.random_range(-1.0..1.0));
        let x = tape.constant(x);
        multi_head(&mut tape, x, &pos.inputs, &w, &cfg.attention)?;
    }
    Ok((tape.score_elements(), started.elapsed().as_secs_f64()))
}

/// Measures attention score-tensor sizes for full and windowed attention
/// over the configured lengths and head counts, writes `bench.csv`, and
/// checks the counts against batch·N·L² and batch·N·L·window.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let b = &cfg.bench;
    let variant = cfg.encoder.attention.variant;
    let mut rows = Vec::new();
    for &length in &b.lengths {
        for &heads in &b.heads {
            for window in [None, Some(b.window)] {
                let (score_elements, wall_secs) = measure(variant, window, length, heads, b.d_head, b.batch, cfg.seed())?;
                let expected = b.batch * heads * length * window.unwrap_or(length);
                rows.push(BenchRow { variant, window, length, heads, batch: b.batch, score_elements, expected, wall_secs });
            }
        }
    }

    ensure_dir(&cfg.output_dir)?;
    let mut table = CsvTable::new(
        &cfg.hash(),
        cfg.seed(),
        &["variant", "mode", "window", "length", "heads", "batch", "score_elements", "expected", "wall_secs"],
    )?;
    for r in &rows {
        table.row([
            r.variant.to_string(),
            if r.window.is_some() { "windowed" } else { "full" }.to_string(),
            r.window.map(|w| w.to_string()).unwrap_or_default(),
            r.length.to_string(),
            r.heads.to_string(),
            r.batch.to_string(),
            r.score_elements.to_string(),
            r.expected.to_string(),
            format!("{:.6}", r.wall_secs),
        ])?;
    }
    let csv = cfg.output_dir.join("bench.csv");
    table.write(&csv)?;

    if let Some(r) = rows.iter().find(|r| r.score_elements != r.expected) {
        return Err(AssertionFailure(format!(
            "{} attention at L={} with {} heads materialized {} score elements, expected {}",
            if r.window.is_some() { "windowed" } else { "full" },
            r.length,
            r.heads,
            r.score_elements,
            r.expected
        ))
        .into());
    }
    Ok(BenchReport { rows, csv })
}
