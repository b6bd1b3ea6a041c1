use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use lightattn::gradcheck::{grad_check_report, standard_suite, SuiteRow};
use lightattn::tape::BackwardRule;
use lightattn::Tensor;

use super::ensure_dir;
use crate::config::ExperimentConfig;
use crate::report::CsvTable;
use crate::GradcheckFailure;

pub struct GradcheckReport {
    pub rows: Vec<SuiteRow>,
    pub csv: PathBuf,
}

/// `x ↦ x³` with a backward rule that forgets the factor 3.
struct BrokenCube;

impl BackwardRule for BrokenCube {
    fn name(&self) -> &str {
        "broken_cube"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad_output).map(|(x, g)| x * x * g).collect()]
    }
}

fn broken_row(eps: f64) -> Result<SuiteRow> {
    let x = Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0])?;
    let report = grad_check_report(
        |tape, p| {
            let v = tape.value(p[0]).clone();
            let cubed = Tensor::from_vec(v.shape(), v.data().iter().map(|a| a * a * a).collect())?;
            let y = tape.custom(&[p[0]], cubed, Arc::new(BrokenCube));
            Ok(tape.sum(y))
        },
        &[x],
        eps,
    )?;
    Ok(SuiteRow { name: "custom broken_cube (negative control)".into(), report })
}

/// Runs the finite-difference suite and writes `gradcheck.csv`. Fails with
/// [`GradcheckFailure`] if any row reaches the tolerance.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    let gc = &cfg.gradcheck;
    let mut rows = standard_suite(gc.eps)?;
    if gc.corrupt_backward {
        rows.push(broken_row(gc.eps)?);
    }

    ensure_dir(&cfg.output_dir)?;
    let mut table = CsvTable::new(
        &cfg.hash(),
        cfg.seed(),
        &["check", "max_rel_error", "param", "element", "analytic", "numeric", "pass"],
    )?;
    let mut failures = Vec::new();
    for r in &rows {
        let pass = r.report.max_rel_error < gc.tolerance;
        if !pass {
            failures.push(format!("{} ({:e})", r.name, r.report.max_rel_error));
        }
        table.row([
            r.name.clone(),
            format!("{:e}", r.report.max_rel_error),
            r.report.param.to_string(),
            r.report.element.to_string(),
            r.report.analytic.to_string(),
            r.report.numeric.to_string(),
            pass.to_string(),
        ])?;
    }
    let csv = cfg.output_dir.join("gradcheck.csv");
    table.write(&csv)?;
    if !failures.is_empty() {
        return Err(GradcheckFailure { failures }.into());
    }
    Ok(GradcheckReport { rows, csv })
}
