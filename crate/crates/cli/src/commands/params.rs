use std::path::PathBuf;

use anyhow::Result;
use lightattn::attention::{position_extras, Variant};
use lightattn::encoder::{count_encoder_parameters, layer_stack_parameters, EncoderConfig};

use super::ensure_dir;
use crate::config::ExperimentConfig;
use crate::report::CsvTable;
use crate::AssertionFailure;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamsRow {
    pub variant: Variant,
    pub encoder_params: usize,
    pub layer_stack_params: usize,
    /// Layer-stack parameters with sharing turned off.
    pub unshared_layer_stack_params: usize,
    /// Position-specific scalars in one attention layer.
    pub position_extras: usize,
}

pub struct ParamsReport {
    pub rows: Vec<ParamsRow>,
    pub csv: PathBuf,
}

pub fn count_row(encoder: &EncoderConfig, variant: Variant) -> ParamsRow {
    let e = encoder.with_variant(variant);
    let unshared = EncoderConfig { share_layers: false, ..e.clone() };
    ParamsRow {
        variant,
        encoder_params: count_encoder_parameters(&e),
        layer_stack_params: layer_stack_parameters(&e),
        unshared_layer_stack_params: layer_stack_parameters(&unshared),
        position_extras: position_extras(&e.attention),
    }
}

/// Counts parameters per variant and checks light ≤ concat_abs < relative_dai
/// on both encoder totals and position extras.
pub fn cmd_params(cfg: &ExperimentConfig) -> Result<ParamsReport> {
    let rows: Vec<ParamsRow> = cfg.variants.iter().map(|&v| count_row(&cfg.encoder, v)).collect();

    ensure_dir(&cfg.output_dir)?;
    let mut table = CsvTable::new(
        &cfg.hash(),
        cfg.seed(),
        &["variant", "encoder_params", "layer_stack_params", "unshared_layer_stack_params", "position_extras"],
    )?;
    for r in &rows {
        table.row([
            r.variant.to_string(),
            r.encoder_params.to_string(),
            r.layer_stack_params.to_string(),
            r.unshared_layer_stack_params.to_string(),
            r.position_extras.to_string(),
        ])?;
    }
    let csv = cfg.output_dir.join("params.csv");
    table.write(&csv)?;

    let all: Vec<ParamsRow> = [Variant::Light, Variant::ConcatAbs, Variant::RelativeDai]
        .into_iter()
        .map(|v| count_row(&cfg.encoder, v))
        .collect();
    let ordered = |f: fn(&ParamsRow) -> usize| f(&all[0]) <= f(&all[1]) && f(&all[1]) < f(&all[2]);
    if !ordered(|r| r.encoder_params) || !ordered(|r| r.position_extras) {
        return Err(AssertionFailure(format!(
            "expected light <= concat_abs < relative_dai, got totals {}/{}/{} and extras {}/{}/{}",
            all[0].encoder_params,
            all[1].encoder_params,
            all[2].encoder_params,
            all[0].position_extras,
            all[1].position_extras,
            all[2].position_extras
        ))
        .into());
    }
    Ok(ParamsReport { rows, csv })
}
