//! Small convolutional classifiers: a stack of conv blocks, global average
//! pooling, and a replaceable linear head.
//!
//! Block `i` has `base_channels * width_multiplier * 2^i` output channels and
//! runs `conv3x3 -> [batch-norm] -> relu -> maxpool2x2`. The pooled output of
//! the last block is the penultimate feature vector.

use std::io::{BufRead, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::tensor::{read_tensor, write_tensor, BatchNormStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"RTLCKPT1";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub base_channels: usize,
    pub width_multiplier: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub use_batchnorm: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.base_channels * self.width_multiplier * (1 << self.num_blocks.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_channels == 0 || self.num_blocks == 0 {
            return Err(Error::config("input_channels, base_channels and num_blocks must be positive"));
        }
        if self.width_multiplier == 0 {
            return Err(Error::config("width_multiplier must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        let factor = 1usize << self.num_blocks;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::config(format!(
                "input_size {} is not divisible by 2^num_blocks = {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    fn block_channels(&self, i: usize) -> usize {
        self.base_channels * self.width_multiplier * (1 << i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    /// Present only when the block has no batch-norm.
    pub bias: Option<Tensor>,
    pub norm: Option<BatchNorm>,
}

/// Per-block batch statistics `(mean, biased variance)` from a train-mode pass.
pub type BatchStatistics = Vec<Option<(Vec<f64>, Vec<f64>)>>;

/// Which parameter leaves of a recorded pass require gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    All,
    HeadOnly,
    Nothing,
}

/// Result of one differentiated training-mode pass.
pub struct StepOutput {
    pub loss: f64,
    /// Gradients in `params()` order; `None` for untracked parameters.
    pub grads: Vec<Option<Vec<f64>>>,
    pub batch_stats: BatchStatistics,
    pub predictions: Vec<usize>,
}

/// Handles into a recorded forward pass.
pub struct Forward {
    pub features: Var,
    pub logits: Var,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
    pub batch_stats: BatchStatistics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    blocks: Vec<ConvBlock>,
    head_weight: Tensor,
    head_bias: Tensor,
    mode: Mode,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn head_init(seed: u64, feature_dim: usize, num_classes: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (he_normal(&mut rng, &[feature_dim, num_classes], feature_dim), Tensor::zeros(&[num_classes]))
}

impl Network {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut in_ch = config.input_channels;
        for i in 0..config.num_blocks {
            let out_ch = config.block_channels(i);
            let kernel = he_normal(&mut rng, &[out_ch, in_ch, 3, 3], in_ch * 9);
            let (bias, norm) = if config.use_batchnorm {
                (None, Some(BatchNorm::new(out_ch)))
            } else {
                (Some(Tensor::zeros(&[out_ch])), None)
            };
            blocks.push(ConvBlock { kernel, bias, norm });
            in_ch = out_ch;
        }
        // Drawn from the same stream after the backbone, so the backbone does
        // not depend on num_classes.
        let normal = Normal::new(0.0, (2.0 / config.feature_dim() as f64).sqrt()).expect("positive std");
        let head_weight = Tensor::from_fn(&[config.feature_dim(), config.num_classes], |_| normal.sample(&mut rng));
        let head_bias = Tensor::zeros(&[config.num_classes]);
        Ok(Network { config, blocks, head_weight, head_bias, mode: Mode::Train })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn blocks(&self) -> &[ConvBlock] {
        &self.blocks
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head_weight, &self.head_bias)
    }

    /// A new network with a freshly initialized `num_classes`-way head and an
    /// untouched backbone.
    pub fn replace_head(&self, num_classes: usize, seed: u64) -> Result<Network> {
        if num_classes < 2 {
            return Err(Error::config(format!("num_classes must be at least 2, got {num_classes}")));
        }
        let (head_weight, head_bias) = head_init(seed, self.feature_dim(), num_classes);
        let mut config = self.config.clone();
        config.num_classes = num_classes;
        Ok(Network { config, blocks: self.blocks.clone(), head_weight, head_bias, mode: self.mode })
    }

    /// Trainable parameters in declaration order; the head is always last.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.kernel);
            if let Some(bias) = &b.bias {
                out.push(bias);
            }
            if let Some(n) = &b.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.kernel);
            if let Some(bias) = &mut b.bias {
                out.push(bias);
            }
            if let Some(n) = &mut b.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Number of entries in `params()` that belong to the head.
    pub const HEAD_PARAM_TENSORS: usize = 2;

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Running mean/variance tensors of every batch-norm layer, block order.
    pub fn running_stats(&self) -> Vec<(&Tensor, &Tensor)> {
        self.blocks
            .iter()
            .filter_map(|b| b.norm.as_ref().map(|n| (&n.running_mean, &n.running_var)))
            .collect()
    }

    /// Hash over backbone parameters and running statistics.
    pub fn backbone_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        let params = self.params();
        for p in &params[..params.len() - Self::HEAD_PARAM_TENSORS] {
            h.update_f64s(p.data());
        }
        for (m, v) in self.running_stats() {
            h.update_f64s(m.data());
            h.update_f64s(v.data());
        }
        h.finish()
    }

    pub fn head_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update_f64s(self.head_weight.data());
        h.update_f64s(self.head_bias.data());
        h.finish()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match *shape {
            [_, ch, h, w] if ch == c.input_channels && h == c.input_size && w == c.input_size => Ok(()),
            _ => Err(Error::dim(format!(
                "input shape {shape:?} does not match model geometry [N, {}, {}, {}]",
                c.input_channels, c.input_size, c.input_size
            ))),
        }
    }

    /// Records a forward pass on `tape`, with parameter leaves requiring
    /// grad as selected by `track`. Batch-norm uses batch statistics in train mode and
    /// running statistics in eval mode; running statistics are never
    /// modified here.
    pub fn record(&self, tape: &mut Tape, x: Var, track: Track) -> Result<Forward> {
        self.check_input(tape.value(x).shape())?;
        let mut params = Vec::new();
        let backbone = track == Track::All;
        let mut leaf = |tape: &mut Tape, t: &Tensor| {
            let v = tape.leaf(t.clone().with_requires_grad(backbone));
            params.push(v);
            v
        };
        let mut h = x;
        let mut batch_stats = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let k = leaf(tape, &block.kernel);
            h = tape.conv2d(h, k, 1, 1)?;
            if let Some(bias) = &block.bias {
                let b = leaf(tape, bias);
                h = tape.add_bias(h, b)?;
            }
            let mut stats = None;
            if let Some(norm) = &block.norm {
                let g = leaf(tape, &norm.gamma);
                let b = leaf(tape, &norm.beta);
                let mode = match self.mode {
                    Mode::Train => BatchNormStats::Batch,
                    Mode::Eval => BatchNormStats::Running {
                        mean: norm.running_mean.data().to_vec(),
                        var: norm.running_var.data().to_vec(),
                    },
                };
                let (out, s) = tape.batch_norm(h, g, b, mode, BN_EPS)?;
                h = out;
                stats = s;
            }
            batch_stats.push(stats);
            h = tape.relu(h);
            h = tape.max_pool2d(h)?;
        }
        let features = tape.global_avg_pool(h)?;
        let head = track != Track::Nothing;
        let w = tape.leaf(self.head_weight.clone().with_requires_grad(head));
        let b = tape.leaf(self.head_bias.clone().with_requires_grad(head));
        params.extend([w, b]);
        let z = tape.matmul(features, w)?;
        let logits = tape.add_bias(z, b)?;
        Ok(Forward { features, logits, params, batch_stats })
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let f = self.record(&mut tape, xv, Track::Nothing)?;
        Ok(tape.value(f.features).clone())
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let f = self.record(&mut tape, xv, Track::Nothing)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Applies the linear head to a `[N, feature_dim]` matrix.
    pub fn apply_head(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.leaf(features.clone());
        let w = tape.leaf(self.head_weight.clone());
        let b = tape.leaf(self.head_bias.clone());
        let z = tape.matmul(f, w)?;
        let out = tape.add_bias(z, b)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Mean cross-entropy at `x` with gradients for the tracked parameters,
    /// the batch statistics observed, and the predicted classes.
    pub fn loss_and_grads(&self, x: &Tensor, labels: &[usize], track: Track) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let fwd = self.record(&mut tape, xv, track)?;
        let predictions = argmax_rows(tape.value(fwd.logits));
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        let grads = fwd.params.iter().map(|&p| tape.take_grad(p)).collect();
        Ok(StepOutput { loss: value, grads, batch_stats: fwd.batch_stats, predictions })
    }

    /// Mean cross-entropy at `x` and its gradient with respect to `x`.
    pub fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone().with_requires_grad(true));
        let fwd = self.record(&mut tape, xv, Track::Nothing)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        let value = tape.value(loss).item()?;
        tape.backward(loss)?;
        let g = tape.take_grad(xv).expect("input requires grad");
        Ok((value, Tensor::new(x.shape().to_vec(), g)?))
    }

    /// Folds train-mode batch statistics into the running estimates using
    /// the unbiased batch variance. `batch_size` is N·H·W per channel.
    pub fn update_running_stats(&mut self, stats: &BatchStatistics, count_per_channel: &[usize]) {
        for ((block, s), &m) in self.blocks.iter_mut().zip(stats).zip(count_per_channel) {
            let (Some(norm), Some((mean, var))) = (&mut block.norm, s) else { continue };
            let mom = norm.momentum;
            let correction = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            for (r, b) in norm.running_mean.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            for (r, b) in norm.running_var.data_mut().iter_mut().zip(var) {
                *r = (1.0 - mom) * *r + mom * b * correction;
            }
        }
    }

    /// Elements per channel seen by each block's batch-norm for a batch of `n`.
    pub fn bn_counts(&self, n: usize) -> Vec<usize> {
        (0..self.blocks.len())
            .map(|i| {
                let s = self.config.input_size >> i;
                n * s * s
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            mode: self.mode,
            bn_momentum: self.blocks.iter().filter_map(|b| b.norm.as_ref().map(|n| n.momentum)).collect(),
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for t in self.checkpoint_tensors() {
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        let digest = crate::hash::fnv1a(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        out
    }

    fn checkpoint_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.kernel);
            if let Some(bias) = &b.bias {
                out.push(bias);
            }
            if let Some(n) = &b.norm {
                out.extend([&n.gamma, &n.beta, &n.running_mean, &n.running_var]);
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    fn checkpoint_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.kernel);
            if let Some(bias) = &mut b.bias {
                out.push(bias);
            }
            if let Some(n) = &mut b.norm {
                out.extend([&mut n.gamma, &mut n.beta, &mut n.running_mean, &mut n.running_var]);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing RTLCKPT1 magic"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        if crate::hash::fnv1a(body) != stored {
            return Err(corrupt("content hash mismatch"));
        }
        let mut cursor = &body[8..];
        let mut line = Vec::new();
        cursor.read_until(b'\n', &mut line)?;
        let header: CheckpointHeader = serde_json::from_slice(line.strip_suffix(b"\n").unwrap_or(&line))
            .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::CorruptCheckpoint(format!("unsupported format version {}", header.format)));
        }
        let mut net = Network::build(header.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("invalid config: {e}")))?;
        net.mode = header.mode;
        let mut momenta = header.bn_momentum.iter();
        for block in &mut net.blocks {
            if let Some(n) = &mut block.norm {
                n.momentum = *momenta.next().ok_or_else(|| corrupt("missing batch-norm momentum"))?;
            }
        }
        for target in net.checkpoint_tensors_mut() {
            let t = read_tensor(&mut cursor).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            if t.shape() != target.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor shape {:?} does not match expected {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            *target = t;
        }
        if !cursor.is_empty() {
            return Err(corrupt("trailing bytes after tensor blobs"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        Network::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: u32,
    config: ModelConfig,
    mode: Mode,
    bn_momentum: Vec<f64>,
}

pub fn argmax_rows(m: &Tensor) -> Vec<usize> {
    let rows = m.shape().first().copied().unwrap_or(1);
    (0..rows)
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
