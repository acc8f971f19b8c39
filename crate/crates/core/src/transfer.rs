//! Fixed-feature and full-network transfer of a pretrained backbone.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datasets::{eval_transform, Dataset, SplitPair};
use crate::error::{Error, Result};
use crate::models::{Mode, Network};
use crate::stats;
use crate::tensor::Tensor;
use crate::trainer::{check_compatible, train_scoped, TrainConfig, TrainLog, UpdateScope};

/// Learning rates searched for every transfer run.
pub const LR_GRID: [f64; 2] = [0.01, 0.001];

const PROBE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Backbone weights frozen; head trained; batch-norm statistics live.
    FixedFeature,
    /// Every parameter fine-tuned.
    FullNetwork,
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransferMode::FixedFeature => "fixed_feature",
            TransferMode::FullNetwork => "full_network",
        })
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fixed_feature" | "fixed" => Ok(TransferMode::FixedFeature),
            "full_network" | "full" => Ok(TransferMode::FullNetwork),
            other => Err(Error::config(format!(
                "unknown transfer mode {other:?} (expected fixed_feature or full_network)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub network: Network,
    /// Test metric per the target's metric kind.
    pub metric: f64,
    pub lr: f64,
    pub log: TrainLog,
}

/// Scores `net` on `data` in eval mode, applying the evaluation transform
/// when training used augmentation.
pub fn evaluate(net: &Network, data: &Dataset, transformed: bool) -> Result<f64> {
    let mut net = net.clone();
    net.set_mode(Mode::Eval);
    let mut preds = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(PROBE_BATCH) {
        let (mut x, _) = data.batch(idx)?;
        if transformed {
            x = eval_transform(&x, data.geometry().1)?;
        }
        preds.extend(net.predict(&x)?);
    }
    stats::score(data.metric_kind, &preds, &data.labels, data.class_count)
}

fn check_pretrained(pretrained: &Network) -> Result<()> {
    let (w, _) = pretrained.head();
    if w.shape()[0] != pretrained.feature_dim() {
        return Err(Error::contract(format!(
            "head expects {} features but the backbone produces {}",
            w.shape()[0],
            pretrained.feature_dim()
        )));
    }
    Ok(())
}

/// One transfer run at `config.lr`: fresh head from `head_seed`, then
/// training masked according to `mode`.
pub fn transfer_at(
    pretrained: &Network,
    target: &SplitPair,
    mode: TransferMode,
    config: &TrainConfig,
    head_seed: u64,
) -> Result<TransferOutcome> {
    check_pretrained(pretrained)?;
    let net = pretrained.replace_head(target.train.class_count, head_seed)?;
    check_compatible(&net, &target.train)?;
    let scope = match mode {
        TransferMode::FixedFeature => UpdateScope::HeadOnly,
        TransferMode::FullNetwork => UpdateScope::All,
    };
    let (network, log) = train_scoped(net, &target.train, config, scope)?;
    let metric = evaluate(&network, &target.test, config.augment)?;
    Ok(TransferOutcome { network, metric, lr: config.lr, log })
}

/// Transfer over every learning rate in `lrs`, keeping the run with the best
/// final test metric (earlier grid entries win ties).
pub fn transfer_grid(
    pretrained: &Network,
    target: &SplitPair,
    mode: TransferMode,
    config: &TrainConfig,
    head_seed: u64,
    lrs: &[f64],
) -> Result<TransferOutcome> {
    let mut best: Option<TransferOutcome> = None;
    for &lr in lrs {
        let cfg = TrainConfig { lr, ..config.clone() };
        let out = transfer_at(pretrained, target, mode, &cfg, head_seed)?;
        if best.as_ref().is_none_or(|b| out.metric > b.metric) {
            best = Some(out);
        }
    }
    best.ok_or_else(|| Error::config("learning-rate grid is empty"))
}

/// Transfer with the learning rate chosen from [`LR_GRID`].
pub fn transfer(
    pretrained: &Network,
    target: &SplitPair,
    mode: TransferMode,
    config: &TrainConfig,
    head_seed: u64,
) -> Result<TransferOutcome> {
    transfer_grid(pretrained, target, mode, config, head_seed, &LR_GRID)
}

/// Penultimate-layer features of every sample, computed in eval mode.
pub fn probe_features(pretrained: &Network, data: &Dataset) -> Result<(Tensor, Vec<usize>)> {
    let cfg = pretrained.config();
    let (c, h, w) = data.geometry();
    if (c, h, w) != (cfg.input_channels, cfg.input_size, cfg.input_size) {
        return Err(Error::dim(format!(
            "dataset geometry {c}x{h}x{w} does not match network input {}x{}x{}",
            cfg.input_channels, cfg.input_size, cfg.input_size
        )));
    }
    let mut net = pretrained.clone();
    net.set_mode(Mode::Eval);
    let f = net.feature_dim();
    let mut rows = Vec::with_capacity(data.len() * f);
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(PROBE_BATCH) {
        let (x, _) = data.batch(idx)?;
        rows.extend_from_slice(net.features(&x)?.data());
    }
    Ok((Tensor::new(vec![data.len(), f], rows)?, data.labels.clone()))
}
