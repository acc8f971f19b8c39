//! Experiment orchestration: source-model pretraining, ε sweeps with
//! disjoint selection and evaluation seeds, width and granularity sweeps,
//! an append-only record store, and report generation.

mod report;
mod sweep;

pub use report::{expected_run_ids, r_squared_table, render_report, write_report, Report, RSquaredRow};
pub use sweep::{granularity_experiment, run_sweep, run_sweep_with, select_epsilon, width_sweep};

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::{clean_accuracy, Norm};
use crate::datasets::{self, MetricKind, SplitPair};
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::models::{ModelConfig, Network};
use crate::trainer::{train, TrainConfig, TrainLog};
use crate::transfer::{TransferMode, LR_GRID};

/// Which half of the seed split produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Runs used to choose ε.
    Selection,
    /// Runs on fresh seeds at the chosen ε and the ε=0 baseline.
    Evaluation,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Selection => "selection",
            Phase::Evaluation => "evaluation",
        })
    }
}

/// One transfer run: source model, target, protocol, seed and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub phase: Phase,
    pub source_model: String,
    pub norm: Norm,
    pub epsilon: f64,
    pub width: usize,
    pub mode: TransferMode,
    pub dataset: String,
    pub dataset_hash: u64,
    /// Learning rate picked from the grid.
    pub lr: f64,
    pub seed: u64,
    pub metric: f64,
    pub metric_kind: MetricKind,
    /// Side length the target images were reduced to, for granularity runs.
    pub resolution: Option<usize>,
    /// Clean test accuracy of the source model on its own task.
    pub source_accuracy: Option<f64>,
    pub checkpoint_hash: u64,
    pub wall_clock_secs: f64,
}

/// Appends records as JSON lines, refusing run ids already in the store.
pub fn append_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let existing: BTreeSet<String> = if path.exists() {
        read_records(path)?.into_iter().map(|r| r.run_id).collect()
    } else {
        BTreeSet::new()
    };
    let mut fresh = BTreeSet::new();
    for r in records {
        if existing.contains(&r.run_id) || !fresh.insert(r.run_id.as_str()) {
            return Err(Error::contract(format!("run id {} is already recorded", r.run_id)));
        }
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    file.write_all(&buf)?;
    file.sync_data()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| Error::Load(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

fn default_widths() -> Vec<usize> {
    vec![1]
}

fn default_lr_grid() -> Vec<f64> {
    LR_GRID.to_vec()
}

fn default_transfer() -> TrainConfig {
    TrainConfig::transfer(LR_GRID[0])
}

fn default_checkpoint_dir() -> String {
    "checkpoints".into()
}

fn default_dataset_dir() -> String {
    "datasets".into()
}

fn default_records() -> String {
    "records.jsonl".into()
}

/// An ε sweep over datasets, transfer modes and widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub norm: Norm,
    /// Defaults to the standard grid for `norm` when omitted.
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub selection_seeds: Vec<u64>,
    pub evaluation_seeds: Vec<u64>,
    pub modes: Vec<TransferMode>,
    pub datasets: Vec<String>,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// Template for every transfer run; `lr` and `seed` are overridden.
    #[serde(default = "default_transfer")]
    pub transfer: TrainConfig,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: String,
    #[serde(default = "default_dataset_dir")]
    pub dataset_dir: String,
    #[serde(default = "default_records")]
    pub records: String,
    /// Also rerun the fixed-feature sweep on targets reduced to this side.
    #[serde(default)]
    pub granularity_low: Option<usize>,
}

/// The standard radius grid for each norm.
pub fn default_epsilons(norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L2 => vec![0.0, 0.01, 0.03, 0.05, 0.1, 0.25, 0.5, 1.0, 3.0, 5.0],
        Norm::Linf => [0.5, 1.0, 2.0, 4.0, 8.0].iter().map(|k| k / 255.0).collect(),
    }
}

impl SweepPlan {
    pub fn new(norm: Norm, selection_seeds: Vec<u64>, evaluation_seeds: Vec<u64>) -> Self {
        SweepPlan {
            norm,
            epsilons: default_epsilons(norm),
            selection_seeds,
            evaluation_seeds,
            modes: vec![TransferMode::FixedFeature, TransferMode::FullNetwork],
            datasets: Vec::new(),
            widths: default_widths(),
            transfer: default_transfer(),
            lr_grid: default_lr_grid(),
            checkpoint_dir: default_checkpoint_dir(),
            dataset_dir: default_dataset_dir(),
            records: default_records(),
            granularity_low: None,
        }
    }

    /// ε grid with the default filled in.
    pub fn epsilon_grid(&self) -> Vec<f64> {
        if self.epsilons.is_empty() {
            default_epsilons(self.norm)
        } else {
            self.epsilons.clone()
        }
    }

    /// Every ε a checkpoint is needed for: the grid plus the ε=0 baseline.
    pub fn required_epsilons(&self) -> Vec<f64> {
        let mut eps = self.epsilon_grid();
        if !eps.contains(&0.0) {
            eps.insert(0, 0.0);
        }
        eps
    }

    pub fn validate(&self) -> Result<()> {
        let overlap: Vec<u64> =
            self.selection_seeds.iter().copied().filter(|s| self.evaluation_seeds.contains(s)).collect();
        if !overlap.is_empty() {
            return Err(Error::Plan(format!("selection and evaluation seeds overlap: {overlap:?}")));
        }
        if self.selection_seeds.is_empty() || self.evaluation_seeds.is_empty() {
            return Err(Error::Plan("selection and evaluation seed sets must be non-empty".into()));
        }
        if self.modes.is_empty() || self.datasets.is_empty() || self.widths.is_empty() || self.lr_grid.is_empty() {
            return Err(Error::Plan("modes, datasets, widths and lr_grid must be non-empty".into()));
        }
        let eps = self.epsilon_grid();
        if eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Plan(format!("ε grid must be finite and non-negative: {eps:?}")));
        }
        for (i, e) in eps.iter().enumerate() {
            if eps[..i].contains(e) {
                return Err(Error::Plan(format!("ε {e} appears twice in the grid")));
            }
        }
        let unique = |v: &[u64]| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if !unique(&self.selection_seeds) || !unique(&self.evaluation_seeds) {
            return Err(Error::Plan("seed sets must not repeat seeds".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Plan("widths must be positive".into()));
        }
        self.transfer.validate()
    }
}

/// File name of the source checkpoint for `(width, norm, ε)`. The ε=0
/// model is shared by both norms.
pub fn checkpoint_name(width: usize, norm: Norm, epsilon: f64) -> String {
    if epsilon == 0.0 {
        format!("w{width}-eps0.ckpt")
    } else {
        format!("w{width}-{norm}-eps{epsilon}.ckpt")
    }
}

/// Sidecar written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub source_accuracy: f64,
    pub dataset: String,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("meta.json")
}

/// A pretrained source network and its provenance.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub id: String,
    pub network: Network,
    pub checkpoint_hash: u64,
    pub source_accuracy: Option<f64>,
}

impl SourceModel {
    pub fn new(id: impl Into<String>, network: Network, source_accuracy: Option<f64>) -> Self {
        let checkpoint_hash = fnv1a(&network.to_bytes());
        SourceModel { id: id.into(), network, checkpoint_hash, source_accuracy }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        let network = Network::from_bytes(&bytes)?;
        let meta = meta_path(path);
        let source_accuracy = if meta.exists() {
            let m: SourceMeta = serde_json::from_slice(&std::fs::read(&meta)?)?;
            Some(m.source_accuracy)
        } else {
            None
        };
        let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        Ok(SourceModel { id, network, checkpoint_hash: fnv1a(&bytes), source_accuracy })
    }
}

/// Pretrained source models keyed by `(width, ε)`.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    models: BTreeMap<(usize, u64), SourceModel>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, width: usize, epsilon: f64, model: SourceModel) {
        self.models.insert((width, epsilon.to_bits()), model);
    }

    pub fn get(&self, width: usize, epsilon: f64) -> Option<&SourceModel> {
        self.models.get(&(width, epsilon.to_bits()))
    }

    /// `(width, ε)` pairs the plan needs but the registry lacks.
    pub fn missing(&self, plan: &SweepPlan) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for &w in &plan.widths {
            for e in plan.required_epsilons() {
                if self.get(w, e).is_none() {
                    out.push((w, e));
                }
            }
        }
        out
    }

    /// Loads every checkpoint the plan needs from `dir`, failing before
    /// anything runs if any is absent.
    pub fn load_for(plan: &SweepPlan, dir: &Path) -> Result<Self> {
        let mut missing = Vec::new();
        let mut reg = Registry::new();
        for &w in &plan.widths {
            for e in plan.required_epsilons() {
                let path = dir.join(checkpoint_name(w, plan.norm, e));
                if !path.exists() {
                    missing.push(path.display().to_string());
                    continue;
                }
                reg.insert(w, e, SourceModel::load(&path)?);
            }
        }
        if !missing.is_empty() {
            return Err(Error::Plan(format!("missing source checkpoints: {}", missing.join(", "))));
        }
        Ok(reg)
    }
}

/// Paths of the two halves of a stored dataset.
pub fn dataset_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.train.rtld")), dir.join(format!("{name}.test.rtld")))
}

pub fn save_pair(dir: &Path, name: &str, pair: &SplitPair) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (tr, te) = dataset_paths(dir, name);
    datasets::save(&pair.train, &tr)?;
    datasets::save(&pair.test, &te)?;
    Ok(())
}

pub fn load_pair(dir: &Path, name: &str) -> Result<SplitPair> {
    let (tr, te) = dataset_paths(dir, name);
    Ok(SplitPair { train: datasets::load(&tr)?, test: datasets::load(&te)? })
}

/// Trains one source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub model: ModelConfig,
    /// Stored dataset name, resolved in the dataset directory.
    pub dataset: String,
    pub train: TrainConfig,
    #[serde(default = "default_dataset_dir")]
    pub dataset_dir: String,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: String,
    /// Checkpoint file name; defaults to the registry naming scheme.
    #[serde(default)]
    pub output: Option<String>,
}

impl PretrainSpec {
    pub fn checkpoint_file(&self) -> String {
        self.output.clone().unwrap_or_else(|| {
            let (norm, eps) = self.train.attack.as_ref().map_or((Norm::L2, 0.0), |a| (a.norm, a.epsilon));
            checkpoint_name(self.model.width_multiplier, norm, eps)
        })
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub source_accuracy: f64,
    pub log: TrainLog,
}

/// Trains the source model, then writes the checkpoint, its accuracy
/// sidecar and the epoch log (JSON lines) under `root`.
pub fn pretrain(spec: &PretrainSpec, root: &Path) -> Result<PretrainOutcome> {
    spec.model.validate()?;
    let pair = load_pair(&root.join(&spec.dataset_dir), &spec.dataset)?;
    let net = Network::build(spec.model.clone())?;
    let (net, log) = train(net, &pair.train, &spec.train)?;
    let source_accuracy = clean_accuracy(&net, &pair.test)?;
    let dir = root.join(&spec.checkpoint_dir);
    std::fs::create_dir_all(&dir)?;
    let checkpoint = dir.join(spec.checkpoint_file());
    net.save(&checkpoint)?;
    let meta = SourceMeta { source_accuracy, dataset: spec.dataset.clone() };
    std::fs::write(meta_path(&checkpoint), serde_json::to_vec_pretty(&meta)?)?;
    let mut lines = Vec::new();
    log.write_json_lines(&mut lines)?;
    std::fs::write(checkpoint.with_extension("log.jsonl"), lines)?;
    Ok(PretrainOutcome { checkpoint, source_accuracy, log })
}
