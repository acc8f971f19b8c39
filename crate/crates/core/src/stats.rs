//! Accuracy metrics, multi-trial summaries, Welch's t-test with the
//! table-bolding rule, and the R² of an accuracy-transfer fit.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::datasets::MetricKind;
use crate::error::{Error, Result};

fn check_pairs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::contract("no predictions to score"));
    }
    Ok(())
}

/// Fraction of exact matches.
pub fn top1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean over classes of per-class accuracy.
pub fn mean_per_class(preds: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    check_pairs(preds, labels)?;
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= class_count {
            return Err(Error::contract(format!("label {y} outside [0, {class_count})")));
        }
        totals[y] += 1;
        hits[y] += usize::from(p == y);
    }
    if let Some(c) = totals.iter().position(|&t| t == 0) {
        return Err(Error::contract(format!("class {c} has no samples")));
    }
    let sum: f64 = hits.iter().zip(&totals).map(|(&h, &t)| h as f64 / t as f64).sum();
    Ok(sum / class_count as f64)
}

/// Scores predictions with the dataset's declared metric.
pub fn score(kind: MetricKind, preds: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    match kind {
        MetricKind::Top1 => top1(preds, labels),
        MetricKind::MeanPerClass => mean_per_class(preds, labels, class_count),
    }
}

/// Repeated observations of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    pub label: String,
    pub observations: Vec<f64>,
}

impl TrialSet {
    pub fn new(label: impl Into<String>, observations: Vec<f64>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::contract("a trial set needs at least one observation"));
        }
        if observations.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("trial observations must be finite"));
        }
        Ok(TrialSet { label: label.into(), observations })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.observations.iter().sum::<f64>() / self.len() as f64
    }

    /// Bessel-corrected variance; absent for a single observation.
    pub fn variance(&self) -> Option<f64> {
        let n = self.len();
        if n < 2 {
            return None;
        }
        let m = self.mean();
        Some(self.observations.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64)
    }

    pub fn std(&self) -> Option<f64> {
        self.variance().map(f64::sqrt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

pub fn aggregate(trials: &TrialSet) -> Summary {
    Summary { mean: trials.mean(), std: trials.std(), n: trials.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-tailed p-value.
    pub p: f64,
    pub significant_at_95: bool,
}

/// Two-sample unequal-variance t-test.
pub fn welch_t_test(a: &TrialSet, b: &TrialSet) -> Result<WelchResult> {
    let (Some(va), Some(vb)) = (a.variance(), b.variance()) else {
        return Err(Error::contract(format!(
            "Welch's test needs at least two observations per set ({} has {}, {} has {})",
            a.label,
            a.len(),
            b.label,
            b.len()
        )));
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let diff = a.mean() - b.mean();
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        if diff == 0.0 {
            return Ok(WelchResult { t: 0.0, df: na + nb - 2.0, p: 1.0, significant_at_95: false });
        }
        return Err(Error::contract(format!(
            "{} and {} have different means and zero variance; the t statistic is unbounded",
            a.label, b.label
        )));
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = if t == 0.0 { 1.0 } else { beta_reg(df / 2.0, 0.5, df / (df + t * t)) };
    Ok(WelchResult { t, df, p, significant_at_95: p < 0.05 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bold {
    BoldA,
    BoldB,
    BoldBoth,
}

/// Bold the higher mean when the difference is significant, otherwise both.
pub fn bolding_rule(a: &TrialSet, b: &TrialSet) -> Result<Bold> {
    let w = welch_t_test(a, b)?;
    Ok(if !w.significant_at_95 {
        Bold::BoldBoth
    } else if a.mean() > b.mean() {
        Bold::BoldA
    } else {
        Bold::BoldB
    })
}

/// Squared Pearson correlation of `x` and `y`.
pub fn r_squared(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!("x has {} values, y has {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::contract("r_squared needs at least three points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let (dx, dy) = (xi - mx, yi - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::contract("x is constant"));
    }
    if syy == 0.0 {
        return Err(Error::contract("y is constant"));
    }
    Ok(sxy * sxy / (sxx * syy))
}

/// Formats `v` with four significant figures.
pub fn four_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{v:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}
