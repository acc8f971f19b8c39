//! PGD adversarial examples under L2 and L∞ budgets.
//!
//! Each step moves along the normalized loss gradient (unit L2 direction, or
//! its sign for L∞) and projects the accumulated perturbation back onto the
//! ε-ball around the clean input, one ball per sample.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, Network};
use crate::tensor::{l2, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl Norm {
    pub fn of(self, values: &[f64]) -> f64 {
        match self {
            Norm::L2 => l2(values),
            Norm::Linf => values.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            other => Err(Error::config(format!("unknown norm {other:?} (expected l2 or linf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    /// Ball radius in input units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub random_start: bool,
    /// Clamp `x + delta` to `[0, 1]` after each projection.
    #[serde(default)]
    pub clip_to_unit: bool,
    /// Seeds the random start; unused otherwise.
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    /// Three steps of size `2ε/3`, no random start.
    pub fn training(norm: Norm, epsilon: f64) -> Self {
        AttackSpec { norm, epsilon, steps: 3, step_size: epsilon * 2.0 / 3.0, random_start: false, clip_to_unit: false, seed: 0 }
    }

    /// Twenty steps of size `2.5ε/20`.
    pub fn evaluation(norm: Norm, epsilon: f64) -> Self {
        AttackSpec { norm, epsilon, steps: 20, step_size: epsilon * 2.5 / 20.0, random_start: false, clip_to_unit: false, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and non-negative, got {}", self.epsilon)));
        }
        if self.epsilon > 0.0 && self.steps > 0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step_size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.epsilon == 0.0 || self.steps == 0
    }
}

/// Anything whose loss can be differentiated with respect to its input.
pub trait Differentiable {
    /// Mean loss over the batch and its gradient with respect to `x`.
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
}

impl Differentiable for Network {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        Network::loss_and_input_grad(self, x, labels)
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Network::predict(self, x)
    }
}

/// Binary linear scorer `s(x) = w·x + b` with loss `-s(x)·(2y-1)`, averaged
/// over the batch. Predicts class 1 iff `s(x) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    fn check(&self, x: &Tensor, labels: Option<&[usize]>) -> Result<usize> {
        let n = x.shape().first().copied().unwrap_or(1);
        if x.row_len() != self.weights.len() {
            return Err(Error::dim(format!(
                "linear model has {} weights but samples have {} entries",
                self.weights.len(),
                x.row_len()
            )));
        }
        if let Some(y) = labels {
            if y.len() != n {
                return Err(Error::dim(format!("{} labels for {n} samples", y.len())));
            }
            if let Some(bad) = y.iter().find(|&&v| v > 1) {
                return Err(Error::Index(format!("binary label expected, got {bad}")));
            }
        }
        Ok(n)
    }
}

impl Differentiable for LinearModel {
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let n = self.check(x, Some(labels))?;
        let mut grad = Tensor::zeros(x.shape());
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let sign = 2.0 * y as f64 - 1.0;
            loss -= self.score(x.row(i)) * sign;
            for (g, w) in grad.row_mut(i).iter_mut().zip(&self.weights) {
                *g = -sign * w / n as f64;
            }
        }
        Ok((loss / n as f64, grad))
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let n = self.check(x, None)?;
        Ok((0..n).map(|i| usize::from(self.score(x.row(i)) > 0.0)).collect())
    }
}

/// Sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn step_down(v: f64) -> f64 {
    if v > 0.0 {
        f64::from_bits(v.to_bits() - 1)
    } else {
        v
    }
}

/// Projects `values` (one perturbation) onto the ε-ball in place.
///
/// L2 rescales by `ε/‖δ‖` when outside the ball; the scale is nudged down
/// until the rounded result measures `≤ ε`, which makes the map idempotent.
/// L∞ clamps each coordinate.
pub fn project_in_place(values: &mut [f64], norm: Norm, epsilon: f64) {
    match norm {
        Norm::L2 => {
            let n = l2(values);
            if n <= epsilon || !n.is_finite() {
                return;
            }
            let original = values.to_vec();
            let mut scale = epsilon / n;
            loop {
                for (v, o) in values.iter_mut().zip(&original) {
                    *v = o * scale;
                }
                if l2(values) <= epsilon {
                    break;
                }
                scale = step_down(scale);
            }
        }
        Norm::Linf => {
            for v in values.iter_mut() {
                *v = v.clamp(-epsilon, epsilon);
            }
        }
    }
}

/// Nearest point of the ε-ball to `delta`, treating the whole tensor as one
/// vector.
pub fn project(delta: &Tensor, spec: &AttackSpec) -> Tensor {
    let mut out = delta.clone();
    project_in_place(out.data_mut(), spec.norm, spec.epsilon);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    /// Per sample, the number of steps skipped because the gradient vanished.
    pub skipped_steps: Vec<usize>,
}

fn random_start(x: &Tensor, spec: &AttackSpec) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut delta = Tensor::from_fn(x.shape(), |_| rng.random_range(-spec.epsilon..=spec.epsilon));
    let n = x.shape().first().copied().unwrap_or(1);
    for i in 0..n {
        project_in_place(delta.row_mut(i), spec.norm, spec.epsilon);
    }
    delta
}

fn apply(x: &Tensor, delta: &Tensor) -> Tensor {
    let mut out = x.clone();
    for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += d;
    }
    out
}

/// Runs PGD and reports skipped steps. The model is only read.
pub fn pgd_attack_with_diagnostics<M: Differentiable + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutcome> {
    spec.validate()?;
    let n = x.shape().first().copied().ok_or_else(|| Error::dim("attack input must be batched"))?;
    if spec.is_identity() {
        return Ok(AttackOutcome { adversarial: x.clone(), skipped_steps: vec![0; n] });
    }
    let mut delta = if spec.random_start { random_start(x, spec) } else { Tensor::zeros(x.shape()) };
    let mut skipped = vec![0; n];
    for _ in 0..spec.steps {
        let x_adv = apply(x, &delta);
        let (_, grad) = model.loss_and_input_grad(&x_adv, labels)?;
        for i in 0..n {
            let g = grad.row(i);
            let gnorm = match spec.norm {
                Norm::L2 => l2(g),
                Norm::Linf => Norm::Linf.of(g),
            };
            if gnorm == 0.0 || !gnorm.is_finite() {
                skipped[i] += 1;
                continue;
            }
            let d = delta.row_mut(i);
            match spec.norm {
                Norm::L2 => d.iter_mut().zip(g).for_each(|(d, g)| *d += spec.step_size * g / gnorm),
                Norm::Linf => d.iter_mut().zip(g).for_each(|(d, g)| *d += spec.step_size * sign(*g)),
            }
            project_in_place(d, spec.norm, spec.epsilon);
            if spec.clip_to_unit {
                for (dv, xv) in d.iter_mut().zip(x.row(i)) {
                    *dv = (xv + *dv).clamp(0.0, 1.0) - xv;
                }
            }
        }
    }
    Ok(AttackOutcome { adversarial: apply(x, &delta), skipped_steps: skipped })
}

pub fn pgd_attack<M: Differentiable + ?Sized>(model: &M, x: &Tensor, labels: &[usize], spec: &AttackSpec) -> Result<Tensor> {
    Ok(pgd_attack_with_diagnostics(model, x, labels, spec)?.adversarial)
}

const EVAL_BATCH: usize = 128;

/// Fraction of samples still classified correctly after `pgd_attack`.
pub fn robust_accuracy<M: Differentiable + ?Sized>(model: &M, data: &Dataset, spec: &AttackSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("robust_accuracy on an empty dataset"));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let x_adv = pgd_attack(model, &x, &y, spec)?;
        let pred = model.predict(&x_adv)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Robust accuracy against PGD plus a brute-force search along the segment
/// towards every distinct other-class image: `resolution` evenly spaced points
/// up to the ball boundary and, when it lies inside the ball, the midpoint.
/// A sample counts as robust only if every candidate keeps its label.
pub fn exhaustive_robust_accuracy<M: Differentiable + ?Sized>(
    model: &M,
    data: &Dataset,
    spec: &AttackSpec,
    resolution: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("robust_accuracy on an empty dataset"));
    }
    spec.validate()?;
    let eps = spec.epsilon;
    let per = data.images.row_len();
    let mut distinct: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..data.len() {
        let key: Vec<u64> = data.images.row(i).iter().map(|v| v.to_bits()).chain([data.labels[i] as u64]).collect();
        if seen.insert(key) {
            distinct.push(i);
        }
    }
    let mut correct = 0;
    for i in 0..data.len() {
        let xi = data.images.row(i);
        let yi = data.labels[i];
        let mut candidates: Vec<f64> = xi.to_vec();
        let (x, y) = data.batch(&[i])?;
        candidates.extend_from_slice(pgd_attack(model, &x, &y, spec)?.data());
        if eps > 0.0 {
            for &j in &distinct {
                if data.labels[j] == yi {
                    continue;
                }
                let u: Vec<f64> = data.images.row(j).iter().zip(xi).map(|(a, b)| a - b).collect();
                let dist = spec.norm.of(&u);
                if dist == 0.0 {
                    continue;
                }
                // Furthest step along u that stays inside the ball.
                let reach = (eps / dist).min(1.0);
                let mut fractions: Vec<f64> = (1..=resolution).map(|k| reach * k as f64 / resolution as f64).collect();
                if dist / 2.0 <= eps {
                    fractions.push(0.5);
                }
                for t in fractions {
                    let mut p: Vec<f64> = xi.iter().zip(&u).map(|(a, d)| a + t * d).collect();
                    // Guard the boundary against rounding.
                    let mut delta: Vec<f64> = p.iter().zip(xi).map(|(a, b)| a - b).collect();
                    project_in_place(&mut delta, spec.norm, eps);
                    for ((pv, dv), xv) in p.iter_mut().zip(&delta).zip(xi) {
                        *pv = xv + dv;
                    }
                    candidates.extend(p);
                }
            }
        }
        let rows = candidates.len() / per;
        let mut shape = data.images.shape().to_vec();
        shape[0] = rows;
        let preds = model.predict(&Tensor::new(shape, candidates)?)?;
        if preds.iter().all(|&p| p == yi) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Clean top-1 accuracy.
pub fn clean_accuracy<M: Differentiable + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    robust_accuracy(model, data, &AttackSpec::training(Norm::L2, 0.0))
}

/// Predicted labels for a whole dataset in batches.
pub fn predict_all(net: &Network, data: &Dataset) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        preds.extend(argmax_rows(&net.logits(&x)?));
    }
    Ok(preds)
}
