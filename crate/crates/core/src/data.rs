//! Datasets: the text feature format, CSV manifests, synthetic
//! order/presence tasks, and block splitting for learning curves.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `input_dim × L`, one column per frame.
    pub features: Tensor,
    pub intent: usize,
    pub speaker: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub n_intents: usize,
    pub n_speakers: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// The utterances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { utterances: indices.iter().map(|&i| self.utterances[i].clone()).collect(), ..self.shallow() }
    }

    fn shallow(&self) -> Dataset {
        Dataset { utterances: Vec::new(), n_intents: self.n_intents, n_speakers: self.n_speakers, input_dim: self.input_dim }
    }

    /// Longest utterance, in frames.
    pub fn max_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.features.shape()[1]).max().unwrap_or(0)
    }

    /// Checks shapes and label ranges.
    pub fn validate(&self) -> Result<()> {
        for u in &self.utterances {
            let (d, l) = u.features.dims2()?;
            if d != self.input_dim || l == 0 {
                return Err(Error::Data(format!("utterance '{}' has shape {d}×{l}, expected {}×L", u.id, self.input_dim)));
            }
            if u.intent >= self.n_intents || u.speaker >= self.n_speakers {
                return Err(Error::Data(format!(
                    "utterance '{}' labels ({}, {}) outside {} intents / {} speakers",
                    u.id, u.intent, u.speaker, self.n_intents, self.n_speakers
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Feature files

const FEAT_MAGIC: &str = "FEAT";
const FEAT_VERSION: &str = "1";

/// Serializes `input_dim × L` features: a `FEAT 1 <input_dim> <L>` header,
/// then one line per frame. Values use the shortest exact decimal form.
pub fn format_features(features: &Tensor) -> Result<String> {
    let (d, len) = features.dims2()?;
    let mut out = format!("{FEAT_MAGIC} {FEAT_VERSION} {d} {len}\n");
    for t in 0..len {
        for r in 0..d {
            if r > 0 {
                out.push(' ');
            }
            write!(out, "{:?}", features.at(r, t)).expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, format_features(features)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    parse_features(&text, &path.display().to_string())
}

/// Parses the feature format. `source` names the input in error locations.
pub fn parse_features(text: &str, source: &str) -> Result<Tensor> {
    let at = |line: usize| format!("{source}:{line}");
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or("");
    let fields: Vec<&str> = header.split(' ').collect();
    let [magic, version, d, l] = fields[..] else {
        return Err(Error::format(at(1), format!("expected `{FEAT_MAGIC} {FEAT_VERSION} <input_dim> <L>`, got {header:?}")));
    };
    if magic != FEAT_MAGIC || version != FEAT_VERSION {
        return Err(Error::format(at(1), format!("unsupported header {magic} {version}")));
    }
    let positive = |s: &str, what: &str| -> Result<usize> {
        match s.parse::<usize>() {
            Ok(n) if n > 0 && s.bytes().all(|b| b.is_ascii_digit()) => Ok(n),
            _ => Err(Error::format(at(1), format!("{what} must be a positive integer, got {s:?}"))),
        }
    };
    let (d, len) = (positive(d, "input_dim")?, positive(l, "L")?);

    let mut data = vec![0.0; d * len];
    for t in 0..len {
        let line_no = t + 2;
        let line = lines
            .next()
            .ok_or_else(|| Error::format(at(line_no), format!("expected {len} frames, file ends after {t}")))?;
        let mut count = 0;
        for tok in line.split(' ') {
            if count == d {
                return Err(Error::format(at(line_no), format!("more than {d} values")));
            }
            let v: f64 =
                tok.parse().map_err(|_| Error::format(at(line_no), format!("value {} is not a number: {tok:?}", count + 1)))?;
            if !v.is_finite() {
                return Err(Error::format(at(line_no), format!("non-finite value {tok:?}")));
            }
            data[count * len + t] = v;
            count += 1;
        }
        if count != d {
            return Err(Error::format(at(line_no), format!("expected {d} values, found {count}")));
        }
    }
    // Only the final newline may follow the last frame.
    match (lines.next(), lines.next()) {
        (Some(""), None) | (None, None) => {}
        _ => return Err(Error::format(at(len + 2), "trailing content after the last frame")),
    }
    Tensor::from_vec(&[d, len], data)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// As written in the manifest: relative paths are relative to the manifest's directory.
    pub path: String,
    pub intent: usize,
    pub speaker: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    /// One more than the largest label of each kind (0 when empty).
    pub fn label_counts(&self) -> (usize, usize) {
        let n_int = self.records.iter().map(|r| r.intent + 1).max().unwrap_or(0);
        let n_spk = self.records.iter().map(|r| r.speaker + 1).max().unwrap_or(0);
        (n_int, n_spk)
    }
}

const MANIFEST_HEADER: [&str; 4] = ["id", "path", "intent", "speaker"];

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a manifest, rejecting duplicate ids, unparsable labels and
/// references to files that do not exist.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_HEADER {
        return Err(Error::format(format!("{}:1", path.display()), format!("header must be {}", MANIFEST_HEADER.join(","))));
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let location = format!("{}:{}", path.display(), i + 2);
        let rec: ManifestRecord =
            row.deserialize(None).map_err(|e| Error::format(&location, format!("bad record: {e}")))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Data(format!("duplicate utterance id '{}' at {location}", rec.id)));
        }
        let file = base_dir.join(&rec.path);
        if !file.is_file() {
            return Err(Error::Data(format!("feature file {} for '{}' does not exist", file.display(), rec.id)));
        }
        records.push(rec);
    }
    Ok(Manifest { records, base_dir })
}

/// Loads every feature file of a manifest. Class counts default to the
/// largest label seen plus one; `input_dim` is taken from the first file.
pub fn load_dataset(manifest_path: &Path, n_intents: Option<usize>, n_speakers: Option<usize>) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let (seen_int, seen_spk) = manifest.label_counts();
    let mut utterances = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let features = read_features(&manifest.resolve(rec))?;
        utterances.push(Utterance { id: rec.id.clone(), features, intent: rec.intent, speaker: rec.speaker });
    }
    let input_dim = utterances.first().map_or(0, |u| u.features.shape()[0]);
    let ds = Dataset {
        utterances,
        n_intents: n_intents.unwrap_or(seen_int),
        n_speakers: n_speakers.unwrap_or(seen_spk),
        input_dim,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes one feature file per utterance under `dir` plus `dir/manifest.csv`.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(data.len());
    for u in &data.utterances {
        let name = format!("{}.feat", u.id);
        write_features(&dir.join(&name), &u.features)?;
        records.push(ManifestRecord { id: u.id.clone(), path: name, intent: u.intent, speaker: u.speaker });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Synthetic tasks

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Every utterance holds the same four key tokens; the intent is their order.
    Order,
    /// The intent is which keyword token occurs; order carries no information.
    Presence,
    /// `Order`, plus a per-speaker affine channel distortion of every frame.
    Speakerized,
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order" => Ok(SyntheticTask::Order),
            "presence" => Ok(SyntheticTask::Presence),
            "speakerized" => Ok(SyntheticTask::Speakerized),
            other => Err(Error::param(format!("unknown synthetic task '{other}'"))),
        }
    }
}

/// Token orders used as intents of the order task. The first eight pair up
/// so that every intent differs from some other only in the order of one
/// adjacent pair; the rest follow in lexicographic order.
fn order_intents() -> Vec<[usize; 4]> {
    let mut list = vec![
        [0, 1, 2, 3],
        [1, 0, 2, 3],
        [0, 1, 3, 2],
        [1, 0, 3, 2],
        [2, 3, 0, 1],
        [3, 2, 0, 1],
        [2, 3, 1, 0],
        [3, 2, 1, 0],
    ];
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let distinct = (0..4).all(|i| (i + 1..4).all(|j| p[i] != p[j]));
                    if distinct && !list.contains(&p) {
                        list.push(p);
                    }
                }
            }
        }
    }
    list
}

/// Largest intent count the order task supports (4! permutations).
pub const MAX_ORDER_INTENTS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub task: SyntheticTask,
    pub n_utterances: usize,
    pub n_intents: usize,
    pub n_speakers: usize,
    pub input_dim: usize,
    /// Standard deviation of the per-frame Gaussian perturbation.
    pub noise: f64,
    /// Inclusive frame-count ranges for tokens, gaps between tokens, and
    /// the filler before the first / after the last token.
    pub token_frames: [usize; 2],
    pub gap_frames: [usize; 2],
    pub edge_frames: [usize; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            task: SyntheticTask::Order,
            n_utterances: 2000,
            n_intents: 8,
            n_speakers: 4,
            input_dim: 40,
            noise: 0.5,
            token_frames: [4, 8],
            gap_frames: [12, 16],
            edge_frames: [12, 16],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn new(task: SyntheticTask, n_utterances: usize, n_intents: usize, n_speakers: usize, seed: u64) -> Self {
        SyntheticConfig { task, n_utterances, n_intents, n_speakers, seed, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.n_intents == 0 || self.n_speakers == 0 || self.input_dim == 0 {
            return Err(Error::param("synthetic task needs positive class counts and input_dim"));
        }
        if self.n_utterances < self.n_intents {
            return Err(Error::param(format!(
                "{} utterances cannot cover {} intents",
                self.n_utterances, self.n_intents
            )));
        }
        if self.task != SyntheticTask::Presence && self.n_intents > MAX_ORDER_INTENTS {
            return Err(Error::param(format!("order task supports at most {MAX_ORDER_INTENTS} intents")));
        }
        for [lo, hi] in [self.token_frames, self.gap_frames, self.edge_frames] {
            if lo == 0 || lo > hi {
                return Err(Error::param(format!("frame range [{lo}, {hi}] is empty or starts at 0")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::param("noise must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Shorthand for [`generate`] with default lengths and noise.
pub fn generate_synthetic(
    task: SyntheticTask,
    n_utterances: usize,
    n_intents: usize,
    n_speakers: usize,
    seed: u64,
) -> Result<Dataset> {
    generate(&SyntheticConfig::new(task, n_utterances, n_intents, n_speakers, seed))
}

/// Builds a synthetic dataset. Each utterance is filler, then tokens
/// separated by filler gaps, then filler; every frame is a prototype vector
/// plus Gaussian noise. Intent and speaker labels are each balanced to
/// within one and drawn independently of each other.
pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::param(e.to_string()))?;
    let dim = cfg.input_dim;
    let proto = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| unit.sample(rng)).collect() };

    let filler = proto(&mut rng);
    let n_tokens = match cfg.task {
        SyntheticTask::Presence => cfg.n_intents + 2,
        _ => 4,
    };
    let tokens: Vec<Vec<f64>> = (0..n_tokens).map(|_| proto(&mut rng)).collect();
    let channels: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_speakers)
        .map(|_| {
            let gain = (0..dim).map(|_| rng.random_range(0.6..1.4)).collect();
            let offset = (0..dim).map(|_| 0.5 * unit.sample(&mut rng)).collect();
            (gain, offset)
        })
        .collect();

    let mut intents: Vec<usize> = (0..cfg.n_utterances).map(|i| i % cfg.n_intents).collect();
    let mut speakers: Vec<usize> = (0..cfg.n_utterances).map(|i| i % cfg.n_speakers).collect();
    intents.shuffle(&mut rng);
    speakers.shuffle(&mut rng);
    let orders = order_intents();

    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    for (n, (&intent, &speaker)) in intents.iter().zip(&speakers).enumerate() {
        let sequence: Vec<usize> = match cfg.task {
            SyntheticTask::Presence => {
                let mut s = vec![intent, cfg.n_intents + rng.random_range(0..2), cfg.n_intents + rng.random_range(0..2)];
                s.shuffle(&mut rng);
                s
            }
            _ => orders[intent].to_vec(),
        };
        let span = |rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]| rng.random_range(lo..=hi);
        let mut frames: Vec<&[f64]> = Vec::new();
        frames.extend(std::iter::repeat_n(&filler[..], span(&mut rng, cfg.edge_frames)));
        for (k, &tok) in sequence.iter().enumerate() {
            if k > 0 {
                frames.extend(std::iter::repeat_n(&filler[..], span(&mut rng, cfg.gap_frames)));
            }
            frames.extend(std::iter::repeat_n(&tokens[tok][..], span(&mut rng, cfg.token_frames)));
        }
        frames.extend(std::iter::repeat_n(&filler[..], span(&mut rng, cfg.edge_frames)));

        let len = frames.len();
        let mut data = vec![0.0; dim * len];
        for (t, base) in frames.iter().enumerate() {
            for r in 0..dim {
                let mut v = base[r] + noise.sample(&mut rng);
                if cfg.task == SyntheticTask::Speakerized {
                    let (gain, offset) = &channels[speaker];
                    v = gain[r] * v + offset[r];
                }
                data[r * len + t] = v;
            }
        }
        utterances.push(Utterance {
            id: format!("utt{n:05}"),
            features: Tensor::from_vec(&[dim, len], data)?,
            intent,
            speaker,
        });
    }
    Ok(Dataset { utterances, n_intents: cfg.n_intents, n_speakers: cfg.n_speakers, input_dim: dim })
}

// ---------------------------------------------------------------------------
// Block splits

/// Dataset indices partitioned into blocks, and a block order per fold.
/// Fold `f` trains on the first `k` blocks of `fold_orders[f]` and tests on
/// the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSplit {
    pub blocks: Vec<Vec<usize>>,
    pub fold_orders: Vec<Vec<usize>>,
    /// Seed each fold's block order was shuffled with.
    pub fold_seeds: Vec<u64>,
}

impl BlockSplit {
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_folds(&self) -> usize {
        self.fold_orders.len()
    }

    fn collect(&self, blocks: &[usize]) -> Vec<usize> {
        blocks.iter().flat_map(|&b| self.blocks[b].iter().copied()).collect()
    }

    pub fn train_indices(&self, fold: usize, n_blocks: usize) -> Vec<usize> {
        self.collect(&self.fold_orders[fold][..n_blocks])
    }

    pub fn test_indices(&self, fold: usize, n_blocks: usize) -> Vec<usize> {
        self.collect(&self.fold_orders[fold][n_blocks..])
    }
}

/// Seeded shuffle of `0..n_items`, cut into `n_blocks` contiguous blocks
/// whose sizes differ by at most one; each fold then gets its own
/// re-shuffled block order.
pub fn split_blocks(n_items: usize, n_blocks: usize, n_folds: usize, seed: u64) -> Result<BlockSplit> {
    if n_blocks == 0 || n_folds == 0 {
        return Err(Error::param("need at least one block and one fold"));
    }
    if n_items < n_blocks {
        return Err(Error::param(format!("{n_items} items cannot fill {n_blocks} blocks")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_items).collect();
    order.shuffle(&mut rng);
    let blocks = (0..n_blocks).map(|b| order[b * n_items / n_blocks..(b + 1) * n_items / n_blocks].to_vec()).collect();

    let fold_seeds: Vec<u64> = (0..n_folds).map(|_| rng.random()).collect();
    let fold_orders = fold_seeds
        .iter()
        .map(|&s| {
            let mut o: Vec<usize> = (0..n_blocks).collect();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            o
        })
        .collect();
    Ok(BlockSplit { blocks, fold_orders, fold_seeds })
}
