//! SGD training for standard and adversarial (PGD-in-the-loop) objectives.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{pgd_attack, AttackSpec};
use crate::datasets::{augment, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::models::{Mode, Network, Track};

/// Stream constant separating the augmentation RNG from the shuffle RNG.
const AUGMENT_STREAM: u64 = 0xa076_1d64_78bd_642f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_every: usize,
    /// When present, every batch is replaced by its PGD adversary before
    /// the update.
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    /// Batch-norm mode used while computing training attacks.
    #[serde(default = "default_attack_bn_mode")]
    pub attack_bn_mode: Mode,
    /// Random resized crop + flip on training batches, and the resize /
    /// center-crop transform on evaluation data.
    #[serde(default)]
    pub augment: bool,
    pub seed: u64,
}

fn default_attack_bn_mode() -> Mode {
    Mode::Train
}

impl TrainConfig {
    /// Source-model recipe: 90 epochs, batch 512, lr 0.1 dropping ×10
    /// every 30 epochs.
    pub fn pretraining() -> Self {
        TrainConfig {
            epochs: 90,
            batch_size: 512,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_factor: 10.0,
            lr_drop_every: 30,
            attack: None,
            attack_bn_mode: Mode::Train,
            augment: false,
            seed: 0,
        }
    }

    /// Target-task recipe: 150 epochs, batch 64, drop ×10 every 50 epochs.
    /// Transfer searches `lr` over {0.01, 0.001}.
    pub fn transfer(lr: f64) -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 64,
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_factor: 10.0,
            lr_drop_every: 50,
            attack: None,
            attack_bn_mode: Mode::Train,
            augment: true,
            seed: 0,
        }
    }

    /// Same schedule shape compressed (or stretched) to `epochs`: the drop
    /// interval keeps its fraction of the run.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let every = (self.lr_drop_every as f64 * epochs as f64 / self.epochs as f64).round() as usize;
        self.lr_drop_every = every.max(1);
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_drop_every == 0 {
            return Err(Error::config("epochs, batch_size and lr_drop_every must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::config(format!("lr_drop_factor must be positive, got {}", self.lr_drop_factor)));
        }
        if !self.momentum.is_finite() || !self.weight_decay.is_finite() {
            return Err(Error::config("momentum and weight_decay must be finite"));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    /// Step schedule: `lr / drop_factor^floor(epoch / drop_every)`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::contract(format!("epoch {epoch} outside [0, {})", self.epochs)));
        }
        let drops = (epoch / self.lr_drop_every) as i32;
        Ok(self.lr / self.lr_drop_factor.powi(drops))
    }
}

/// One momentum-SGD update with coupled weight decay:
/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(format!(
            "sgd_step lengths differ: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the inputs the updates were computed on.
    pub loss: f64,
    /// Accuracy on the clean training batches.
    pub accuracy: f64,
    /// Accuracy on the attacked training batches, for adversarial runs.
    pub robust_accuracy: Option<f64>,
    /// Seconds since training started.
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.last().map(|e| e.accuracy)
    }

    pub fn final_robust_accuracy(&self) -> Option<f64> {
        self.last().and_then(|e| e.robust_accuracy)
    }

    pub fn wall_clock_secs(&self) -> f64 {
        self.last().map_or(0.0, |e| e.elapsed_secs)
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn write_json_lines<W: Write>(&self, out: &mut W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Which parameters receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UpdateScope {
    All,
    HeadOnly,
}

/// Trains `net` on `data` and returns it in eval mode with the epoch log.
pub fn train(net: Network, data: &Dataset, config: &TrainConfig) -> Result<(Network, TrainLog)> {
    train_scoped(net, data, config, UpdateScope::All)
}

pub(crate) fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    let cfg = net.config();
    let (c, h, w) = data.geometry();
    if (c, h, w) != (cfg.input_channels, cfg.input_size, cfg.input_size) {
        return Err(Error::dim(format!(
            "dataset {:?} has geometry {c}x{h}x{w}, network expects {}x{}x{}",
            data.name, cfg.input_channels, cfg.input_size, cfg.input_size
        )));
    }
    if data.class_count > net.num_classes() {
        return Err(Error::contract(format!(
            "dataset {:?} has {} classes, network head has {}",
            data.name,
            data.class_count,
            net.num_classes()
        )));
    }
    Ok(())
}

pub(crate) fn train_scoped(
    mut net: Network,
    data: &Dataset,
    config: &TrainConfig,
    scope: UpdateScope,
) -> Result<(Network, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::contract(format!("dataset {:?} is empty", data.name)));
    }
    check_compatible(&net, data)?;
    let policy = config
        .augment
        .then(|| AugmentPolicy::standard(data.geometry().1).for_orientation(data.orientation_sensitive));
    let attack = config.attack.as_ref().filter(|a| !a.is_identity()).cloned();
    let has_attack = config.attack.is_some();
    let track = match scope {
        UpdateScope::All => Track::All,
        UpdateScope::HeadOnly => Track::HeadOnly,
    };
    let n_params = net.params().len();
    let first_updated = match scope {
        UpdateScope::All => 0,
        UpdateScope::HeadOnly => n_params - Network::HEAD_PARAM_TENSORS,
    };
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(config.seed ^ AUGMENT_STREAM);
    let start = Instant::now();
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch)?;
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut clean_correct, mut step_correct) = (0.0, 0usize, 0usize);
        for (batch_index, idx) in order.chunks(config.batch_size).enumerate() {
            net.set_mode(Mode::Train);
            let (mut x, y) = data.batch(idx)?;
            if let Some(p) = &policy {
                x = augment(&x, p, &mut augment_rng)?;
            }
            if has_attack {
                clean_correct += count_correct(&net.predict(&x)?, &y);
            }
            if let Some(spec) = &attack {
                net.set_mode(config.attack_bn_mode);
                x = pgd_attack(&net, &x, &y, spec)?;
                net.set_mode(Mode::Train);
            }
            let step = net.loss_and_grads(&x, &y, track)?;
            if !step.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_index, loss: step.loss });
            }
            let counts = net.bn_counts(y.len());
            net.update_running_stats(&step.batch_stats, &counts);
            let mut params = net.params_mut();
            for i in first_updated..n_params {
                let g = step.grads[i].as_ref().expect("updated parameters are tracked");
                sgd_step(params[i].data_mut(), g, &mut velocity[i], lr, config.momentum, config.weight_decay)?;
            }
            loss_sum += step.loss * y.len() as f64;
            step_correct += count_correct(&step.predictions, &y);
        }
        let n = data.len() as f64;
        let step_acc = step_correct as f64 / n;
        let (accuracy, robust_accuracy) = if has_attack {
            (clean_correct as f64 / n, Some(step_acc))
        } else {
            (step_acc, None)
        };
        log.epochs.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / n,
            accuracy,
            robust_accuracy,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    net.set_mode(Mode::Eval);
    Ok((net, log))
}

fn count_correct(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().zip(labels).filter(|(p, y)| p == y).count()
}
