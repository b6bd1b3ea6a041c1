use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lightattn::attention::Variant;
use lightattn::data::{generate, load_dataset, Dataset, SyntheticConfig};
use lightattn::encoder::EncoderConfig;
use lightattn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where utterances come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// Manifest CSVs; relative paths resolve against the config file.
    Manifest {
        train: PathBuf,
        #[serde(default)]
        eval: Option<PathBuf>,
        #[serde(default)]
        n_intents: Option<usize>,
        #[serde(default)]
        n_speakers: Option<usize>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub n_blocks: usize,
    pub n_folds: usize,
    /// Training-prefix sizes, in blocks.
    pub prefixes: Vec<usize>,
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig { n_blocks: 150, n_folds: 5, prefixes: vec![5, 10, 20, 40, 80, 120] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Negative control: adds an op whose backward rule is deliberately wrong.
    pub corrupt_backward: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { eps: 1e-5, tolerance: 1e-4, corrupt_backward: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub heads: Vec<usize>,
    pub d_head: usize,
    pub window: usize,
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { lengths: vec![64, 128, 256, 512], heads: vec![2, 4, 8], d_head: 8, window: 5, batch: 2 }
    }
}

/// One JSON document drives every command. Omitted sections take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    /// `train.seed` seeds initialization, shuffling and the block split.
    pub train: TrainConfig,
    pub data: DataSource,
    /// Variants compared by `curve`, `params` and `bench`. `train` uses
    /// `encoder.attention.variant`.
    pub variants: Vec<Variant>,
    /// Share of a single data source held out for evaluation by `train`.
    pub eval_fraction: f64,
    /// `train` reports wall-clock time until eval intent accuracy first
    /// reaches this value.
    pub accuracy_threshold: f64,
    pub curve: CurveConfig,
    pub gradcheck: GradcheckConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            variants: Variant::ALL.to_vec(),
            eval_fraction: 0.2,
            accuracy_threshold: 0.9,
            curve: CurveConfig::default(),
            gradcheck: GradcheckConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config and makes manifest paths absolute relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Manifest { train, eval, .. } = &mut cfg.data {
            *train = base.join(&*train);
            if let Some(e) = eval {
                *e = base.join(&*e);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            bail!("variant list is empty");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            bail!("eval_fraction {} outside [0, 1)", self.eval_fraction);
        }
        self.train.validate()?;
        // The encoder may leave max_len at 0 for the data to fill in.
        let mut enc = self.encoder.clone();
        enc.resolve_max_len(1);
        enc.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let content = ExperimentConfig { output_dir: PathBuf::new(), ..self.clone() };
        let json = serde_json::to_vec(&content).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Loads or generates the configured data: `(train, optional eval)`.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let (train, eval) = match &self.data {
            DataSource::Synthetic(s) => (generate(s)?, None),
            DataSource::Manifest { train, eval, n_intents, n_speakers } => {
                let t = load_dataset(train, *n_intents, *n_speakers)?;
                let e = eval.as_ref().map(|p| load_dataset(p, *n_intents, *n_speakers)).transpose()?;
                (t, e)
            }
        };
        for ds in std::iter::once(&train).chain(eval.as_ref()) {
            if !ds.is_empty() && ds.input_dim != self.encoder.input_dim {
                bail!("data has {} feature rows but encoder.input_dim is {}", ds.input_dim, self.encoder.input_dim);
            }
        }
        Ok((train, eval))
    }
}
