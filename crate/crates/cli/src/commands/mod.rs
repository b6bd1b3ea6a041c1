mod bench;
mod curve;
mod gradcheck;
mod params;
mod train;

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

pub use bench::{cmd_bench, BenchReport, BenchRow};
pub use curve::{cmd_curve, CurveReport, CurveRow};
pub use gradcheck::{cmd_gradcheck, GradcheckReport};
pub use params::{cmd_params, count_row, ParamsReport, ParamsRow};
pub use train::{cmd_train, TrainReport};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}
