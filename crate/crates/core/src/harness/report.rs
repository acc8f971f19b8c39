use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::sweep::{run_id, select_epsilon, Job};
use super::{ExperimentRecord, Phase, SweepPlan};
use crate::error::{Error, Result};
use crate::stats::{bolding_rule, four_sig, r_squared, welch_t_test, Bold, TrialSet};
use crate::transfer::TransferMode;

/// Rendered report files.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Every record, one CSV row each.
    pub csv: String,
    /// Robust-vs-standard comparison on the evaluation seeds.
    pub summary: String,
    /// Mean metric per ε on the selection seeds.
    pub sweep: String,
    /// Accuracy-transfer fits, when enough source models are present.
    pub r_squared: Option<String>,
    /// Original vs reduced-resolution curves, when granularity runs exist.
    pub granularity: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RSquaredRow {
    pub epsilon: f64,
    pub mode: TransferMode,
    pub dataset: String,
    pub resolution: Option<usize>,
    /// Distinct source models in the fit.
    pub models: usize,
    pub r_squared: f64,
}

/// `(dataset, mode, width, resolution)`.
type Cell = (String, TransferMode, usize, Option<usize>);

fn cell_of(r: &ExperimentRecord) -> Cell {
    (r.dataset.clone(), r.mode, r.width, r.resolution)
}

fn resolution_label(r: Option<usize>) -> String {
    r.map_or_else(|| "full".to_string(), |v| v.to_string())
}

/// Observations per ε, with ε in ascending order.
fn by_epsilon<'a>(records: impl Iterator<Item = &'a ExperimentRecord>) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(e, _)| *e == r.epsilon) {
            Some((_, v)) => v.push(r.metric),
            None => out.push((r.epsilon, vec![r.metric])),
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let t = TrialSet::new("", values.to_vec()).expect("non-empty finite observations");
    (t.mean(), t.std())
}

fn fmt_std(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn cell_text(values: &[f64], bold: bool) -> String {
    let (m, s) = mean_std(values);
    let body = format!("{m:.4} ± {}", fmt_std(s));
    if bold {
        format!("**{body}** (n={})", values.len())
    } else {
        format!("{body} (n={})", values.len())
    }
}

fn render_csv(records: &[ExperimentRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
}

fn render_summary(records: &[ExperimentRecord]) -> String {
    let mut cells: BTreeMap<Cell, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == Phase::Evaluation) {
        cells.entry(cell_of(r)).or_default().push(r);
    }
    let mut out = String::new();
    out.push_str("# Robust vs. standard transfer\n\n");
    out.push_str(
        "Entries are mean ± sample standard deviation of the target metric over the evaluation seeds. \
         The robust ε was chosen on a disjoint set of selection seeds. Bold marks the higher mean when a \
         two-tailed Welch's t-test is significant at the 95% level; both entries are bold otherwise. \
         The search covers width and ε only.\n",
    );
    let mut sections: BTreeMap<(String, TransferMode), Vec<(usize, Option<usize>, Vec<&ExperimentRecord>)>> =
        BTreeMap::new();
    for ((dataset, mode, width, res), rs) in cells {
        sections.entry((dataset, mode)).or_default().push((width, res, rs));
    }
    if sections.is_empty() {
        out.push_str("\nNo evaluation-seed records.\n");
    }
    for ((dataset, mode), rows) in sections {
        let _ = write!(out, "\n## {dataset} — {mode}\n\n");
        out.push_str("| width | resolution | standard (ε=0) | robust | ε* | robust − standard | p |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for (width, res, rs) in rows {
            let groups = by_epsilon(rs.into_iter());
            let standard = groups.iter().find(|(e, _)| *e == 0.0).map(|(_, v)| v.clone());
            let robust = groups.iter().find(|(e, _)| *e != 0.0).cloned();
            let res = resolution_label(res);
            match (standard, robust) {
                (Some(std_v), Some((eps, rob_v))) => {
                    let a = TrialSet::new("standard", std_v.clone()).expect("non-empty");
                    let b = TrialSet::new("robust", rob_v.clone()).expect("non-empty");
                    let (bold_std, bold_rob, p) = match (bolding_rule(&a, &b), welch_t_test(&a, &b)) {
                        (Ok(bold), Ok(w)) => {
                            (bold != Bold::BoldB, bold != Bold::BoldA, four_sig(w.p))
                        }
                        _ => (false, false, "n/a".to_string()),
                    };
                    let gap = b.mean() - a.mean();
                    let _ = writeln!(
                        out,
                        "| {width} | {res} | {} | {} | {eps} | {gap:+.4} | {p} |",
                        cell_text(&std_v, bold_std),
                        cell_text(&rob_v, bold_rob),
                    );
                }
                (Some(std_v), None) => {
                    let _ = writeln!(
                        out,
                        "| {width} | {res} | {} | — | 0 | +0.0000 | n/a |",
                        cell_text(&std_v, true)
                    );
                }
                (None, Some((eps, rob_v))) => {
                    let _ = writeln!(out, "| {width} | {res} | — | {} | {eps} | n/a | n/a |", cell_text(&rob_v, true));
                }
                (None, None) => {}
            }
        }
    }
    out
}

fn render_sweep(records: &[ExperimentRecord]) -> String {
    let mut cells: BTreeMap<Cell, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.phase == Phase::Selection) {
        cells.entry(cell_of(r)).or_default().push(r);
    }
    let mut out = String::new();
    out.push_str("# ε sweep on the selection seeds\n\n");
    out.push_str("| dataset | mode | width | resolution | ε | mean | std | n |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for ((dataset, mode, width, res), rs) in cells {
        for (eps, v) in by_epsilon(rs.into_iter()) {
            let (m, s) = mean_std(&v);
            let _ = writeln!(
                out,
                "| {dataset} | {mode} | {width} | {} | {eps} | {m:.4} | {} | {} |",
                resolution_label(res),
                fmt_std(s),
                v.len()
            );
        }
    }
    out
}

/// Squared correlation between source accuracy and mean target metric
/// across source models, for every `(ε, mode, dataset, resolution)` with
/// at least three models that report a source accuracy.
pub fn r_squared_table(records: &[ExperimentRecord]) -> Vec<RSquaredRow> {
    type Key = (u64, TransferMode, String, Option<usize>);
    let mut groups: BTreeMap<Key, BTreeMap<String, (f64, Vec<f64>)>> = BTreeMap::new();
    for r in records {
        let Some(acc) = r.source_accuracy else { continue };
        let key = (r.epsilon.to_bits(), r.mode, r.dataset.clone(), r.resolution);
        groups.entry(key).or_default().entry(r.source_model.clone()).or_insert((acc, Vec::new())).1.push(r.metric);
    }
    let mut rows: Vec<RSquaredRow> = Vec::new();
    for ((eps_bits, mode, dataset, resolution), models) in groups {
        let x: Vec<f64> = models.values().map(|(a, _)| *a).collect();
        let y: Vec<f64> = models.values().map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64).collect();
        if let Ok(r2) = r_squared(&x, &y) {
            rows.push(RSquaredRow { epsilon: f64::from_bits(eps_bits), mode, dataset, resolution, models: x.len(), r_squared: r2 });
        }
    }
    rows.sort_by(|a, b| {
        a.epsilon
            .total_cmp(&b.epsilon)
            .then(a.mode.cmp(&b.mode))
            .then(a.dataset.cmp(&b.dataset))
            .then(a.resolution.cmp(&b.resolution))
    });
    rows
}

fn render_r_squared(rows: &[RSquaredRow]) -> String {
    let mut out = String::new();
    out.push_str("# Source accuracy vs. transfer metric\n\n");
    out.push_str("| ε | mode | dataset | resolution | models | R² |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.4} |",
            r.epsilon,
            r.mode,
            r.dataset,
            resolution_label(r.resolution),
            r.models,
            r.r_squared
        );
    }
    out
}

fn render_granularity(records: &[ExperimentRecord]) -> Option<String> {
    let lows: BTreeSet<usize> = records.iter().filter_map(|r| r.resolution).collect();
    if lows.is_empty() {
        return None;
    }
    let mut out = String::new();
    out.push_str("# Granularity: original vs. reduced resolution (fixed-feature, selection seeds)\n\n");
    out.push_str("| dataset | width | resolution | ε | original | reduced |\n|---|---|---|---|---|---|\n");
    let mut datasets: BTreeMap<(String, usize), ()> = BTreeMap::new();
    for r in records.iter().filter(|r| r.resolution.is_some()) {
        datasets.insert((r.dataset.clone(), r.width), ());
    }
    for (dataset, width) in datasets.keys() {
        let select = |res: Option<usize>| {
            by_epsilon(records.iter().filter(|r| {
                r.phase == Phase::Selection
                    && r.mode == TransferMode::FixedFeature
                    && &r.dataset == dataset
                    && r.width == *width
                    && r.resolution == res
            }))
        };
        let original = select(None);
        for &low in &lows {
            for (eps, reduced) in select(Some(low)) {
                let orig = original
                    .iter()
                    .find(|(e, _)| *e == eps)
                    .map_or_else(|| "—".to_string(), |(_, v)| format!("{:.4}", mean_std(v).0));
                let _ = writeln!(
                    out,
                    "| {dataset} | {width} | {low} | {eps} | {orig} | {:.4} |",
                    mean_std(&reduced).0
                );
            }
        }
    }
    Some(out)
}

/// Renders every report file from the records alone. When `expected` is
/// given, any run id it lists that has no record is an error.
pub fn render_report(records: &[ExperimentRecord], expected: Option<&[String]>) -> Result<Report> {
    if let Some(expected) = expected {
        let have: BTreeSet<&str> = records.iter().map(|r| r.run_id.as_str()).collect();
        let missing: Vec<&str> = expected.iter().map(String::as_str).filter(|id| !have.contains(id)).collect();
        if !missing.is_empty() {
            return Err(Error::Report(format!("incomplete runs: {}", missing.join(", "))));
        }
    }
    let mut ids = BTreeSet::new();
    for r in records {
        if !ids.insert(r.run_id.as_str()) {
            return Err(Error::Report(format!("run id {} appears twice", r.run_id)));
        }
        if !r.metric.is_finite() {
            return Err(Error::Report(format!("run {} has a non-finite metric", r.run_id)));
        }
    }
    let rows = r_squared_table(records);
    Ok(Report {
        csv: render_csv(records)?,
        summary: render_summary(records),
        sweep: render_sweep(records),
        r_squared: (!rows.is_empty()).then(|| render_r_squared(&rows)),
        granularity: render_granularity(records),
    })
}

/// Writes the report files into `dir` and returns their paths.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = vec![
        ("records.csv", Some(&report.csv)),
        ("summary.md", Some(&report.summary)),
        ("sweep.md", Some(&report.sweep)),
        ("r_squared.md", report.r_squared.as_ref()),
        ("granularity.md", report.granularity.as_ref()),
    ];
    let mut written = Vec::new();
    for (name, body) in files.drain(..) {
        if let Some(body) = body {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Run ids a plan should produce given the selection records present: every
/// selection run, plus evaluation runs for cells whose selection is complete.
pub fn expected_run_ids(plan: &SweepPlan, records: &[ExperimentRecord]) -> Vec<String> {
    let mut ids = Vec::new();
    let mut resolutions = vec![None];
    if let Some(low) = plan.granularity_low {
        resolutions.push(Some(low));
    }
    let have: BTreeSet<&str> = records.iter().map(|r| r.run_id.as_str()).collect();
    for &res in &resolutions {
        let modes = if res.is_some() { vec![TransferMode::FixedFeature] } else { plan.modes.clone() };
        for name in &plan.datasets {
            for &mode in &modes {
                for &width in &plan.widths {
                    let mut selection = Vec::new();
                    for epsilon in plan.epsilon_grid() {
                        for &seed in &plan.selection_seeds {
                            let job = Job { phase: Phase::Selection, width, epsilon, mode, target: 0, seed };
                            selection.push(run_id(plan, &job, name, res));
                        }
                    }
                    let complete = selection.iter().all(|id| have.contains(id.as_str()));
                    ids.extend(selection);
                    if !complete {
                        continue;
                    }
                    let chosen = select_epsilon(records, name, mode, width, res).expect("selection complete");
                    let mut eps = vec![0.0];
                    if chosen != 0.0 {
                        eps.push(chosen);
                    }
                    for epsilon in eps {
                        for &seed in &plan.evaluation_seeds {
                            let job = Job { phase: Phase::Evaluation, width, epsilon, mode, target: 0, seed };
                            ids.push(run_id(plan, &job, name, res));
                        }
                    }
                }
            }
        }
    }
    ids
}
