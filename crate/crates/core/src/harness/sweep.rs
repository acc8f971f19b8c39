use std::time::Instant;

use rayon::prelude::*;

use super::{ExperimentRecord, Phase, Registry, SweepPlan};
use crate::datasets::{downscale_upscale, Resampling, SplitPair};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::transfer::{transfer_grid, TransferMode};

/// One transfer run waiting to execute.
#[derive(Debug, Clone)]
pub(super) struct Job {
    pub phase: Phase,
    pub width: usize,
    pub epsilon: f64,
    pub mode: TransferMode,
    pub target: usize,
    pub seed: u64,
}

pub(super) fn run_id(plan: &SweepPlan, job: &Job, dataset: &str, resolution: Option<usize>) -> String {
    let eps = if job.epsilon == 0.0 { "eps0".to_string() } else { format!("{}-eps{}", plan.norm, job.epsilon) };
    let res = resolution.map_or(String::new(), |r| format!("/r{r}"));
    format!("{}/{dataset}/{}/w{}/{eps}/s{}{res}", job.phase, job.mode, job.width, job.seed)
}

/// Runs every job in parallel; the output order matches `jobs`.
fn execute(
    plan: &SweepPlan,
    registry: &Registry,
    targets: &[(String, SplitPair)],
    resolution: Option<usize>,
    jobs: &[Job],
) -> Result<Vec<ExperimentRecord>> {
    jobs.par_iter()
        .map(|job| {
            let source = registry
                .get(job.width, job.epsilon)
                .ok_or_else(|| Error::Plan(format!("no source model for width {} ε {}", job.width, job.epsilon)))?;
            let (name, pair) = &targets[job.target];
            let config = TrainConfig { seed: job.seed, ..plan.transfer.clone() };
            let start = Instant::now();
            let out = transfer_grid(&source.network, pair, job.mode, &config, job.seed, &plan.lr_grid)?;
            Ok(ExperimentRecord {
                run_id: run_id(plan, job, name, resolution),
                phase: job.phase,
                source_model: source.id.clone(),
                norm: plan.norm,
                epsilon: job.epsilon,
                width: job.width,
                mode: job.mode,
                dataset: name.clone(),
                dataset_hash: pair.train.content_hash(),
                lr: out.lr,
                seed: job.seed,
                metric: out.metric,
                metric_kind: pair.test.metric_kind,
                resolution,
                source_accuracy: source.source_accuracy,
                checkpoint_hash: source.checkpoint_hash,
                wall_clock_secs: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// ε with the highest mean selection-phase metric for one
/// `(dataset, mode, width, resolution)` cell; ties go to the smaller ε.
/// Evaluation-phase records are ignored.
pub fn select_epsilon(
    records: &[ExperimentRecord],
    dataset: &str,
    mode: TransferMode,
    width: usize,
    resolution: Option<usize>,
) -> Option<f64> {
    let mut cells: Vec<(f64, f64, usize)> = Vec::new();
    for r in records {
        if r.phase != Phase::Selection
            || r.dataset != dataset
            || r.mode != mode
            || r.width != width
            || r.resolution != resolution
        {
            continue;
        }
        match cells.iter_mut().find(|c| c.0 == r.epsilon) {
            Some(c) => {
                c.1 += r.metric;
                c.2 += 1;
            }
            None => cells.push((r.epsilon, r.metric, 1)),
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (eps, sum, n) in cells {
        let mean = sum / n as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((eps, mean));
        }
    }
    best.map(|(e, _)| e)
}

fn check_inputs(plan: &SweepPlan, registry: &Registry, targets: &[(String, SplitPair)]) -> Result<()> {
    plan.validate()?;
    let missing = registry.missing(plan);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|(w, e)| format!("width {w} ε {e}")).collect();
        return Err(Error::Plan(format!("missing source checkpoints: {}", list.join(", "))));
    }
    for name in &plan.datasets {
        if !targets.iter().any(|(n, _)| n == name) {
            return Err(Error::Plan(format!("dataset {name:?} was not provided")));
        }
    }
    for &w in &plan.widths {
        for e in plan.required_epsilons() {
            let cfg = registry.get(w, e).expect("checked above").network.config();
            for (name, pair) in targets {
                let (c, h, wd) = pair.train.geometry();
                if (c, h, wd) != (cfg.input_channels, cfg.input_size, cfg.input_size) {
                    return Err(Error::Plan(format!(
                        "dataset {name:?} is {c}x{h}x{wd} but the width-{w} model takes {}x{}x{}",
                        cfg.input_channels, cfg.input_size, cfg.input_size
                    )));
                }
            }
        }
    }
    Ok(())
}

fn sweep(
    plan: &SweepPlan,
    registry: &Registry,
    targets: &[(String, SplitPair)],
    resolution: Option<usize>,
    on_phase: &mut dyn FnMut(&[ExperimentRecord]) -> Result<()>,
) -> Result<Vec<ExperimentRecord>> {
    check_inputs(plan, registry, targets)?;
    let target_index = |name: &str| targets.iter().position(|(n, _)| n == name).expect("checked");
    let mut selection_jobs = Vec::new();
    for name in &plan.datasets {
        for &mode in &plan.modes {
            for &width in &plan.widths {
                for epsilon in plan.epsilon_grid() {
                    for &seed in &plan.selection_seeds {
                        let target = target_index(name);
                        selection_jobs.push(Job { phase: Phase::Selection, width, epsilon, mode, target, seed });
                    }
                }
            }
        }
    }
    let mut records = execute(plan, registry, targets, resolution, &selection_jobs)?;
    on_phase(&records)?;

    let mut evaluation_jobs = Vec::new();
    for name in &plan.datasets {
        for &mode in &plan.modes {
            for &width in &plan.widths {
                let chosen = select_epsilon(&records, name, mode, width, resolution).expect("selection ran");
                let mut eps = vec![0.0];
                if chosen != 0.0 {
                    eps.push(chosen);
                }
                for epsilon in eps {
                    for &seed in &plan.evaluation_seeds {
                        let target = target_index(name);
                        evaluation_jobs.push(Job { phase: Phase::Evaluation, width, epsilon, mode, target, seed });
                    }
                }
            }
        }
    }
    let evaluation = execute(plan, registry, targets, resolution, &evaluation_jobs)?;
    on_phase(&evaluation)?;
    records.extend(evaluation);
    Ok(records)
}

/// Two-phase sweep: every ε on the selection seeds, then the selected ε
/// and the ε=0 baseline on the evaluation seeds. `on_phase` sees each
/// phase's records as soon as it completes (for persistence).
pub fn run_sweep_with(
    plan: &SweepPlan,
    registry: &Registry,
    targets: &[(String, SplitPair)],
    on_phase: &mut dyn FnMut(&[ExperimentRecord]) -> Result<()>,
) -> Result<Vec<ExperimentRecord>> {
    sweep(plan, registry, targets, None, on_phase)
}

pub fn run_sweep(plan: &SweepPlan, registry: &Registry, targets: &[(String, SplitPair)]) -> Result<Vec<ExperimentRecord>> {
    run_sweep_with(plan, registry, targets, &mut |_| Ok(()))
}

/// The sweep over every width in the plan; records carry their width.
pub fn width_sweep(plan: &SweepPlan, registry: &Registry, targets: &[(String, SplitPair)]) -> Result<Vec<ExperimentRecord>> {
    run_sweep(plan, registry, targets)
}

/// Reduces every target to `low`×`low` and back with nearest-neighbour
/// resampling, then reruns the fixed-feature sweep. Records are tagged with
/// the resolution.
pub fn granularity_experiment(
    plan: &SweepPlan,
    registry: &Registry,
    targets: &[(String, SplitPair)],
    low: usize,
    on_phase: &mut dyn FnMut(&[ExperimentRecord]) -> Result<()>,
) -> Result<Vec<ExperimentRecord>> {
    let mut reduced = Vec::with_capacity(targets.len());
    for (name, pair) in targets {
        let size = pair.train.geometry().1;
        if low == 0 || size % low != 0 {
            return Err(Error::config(format!(
                "resolution {low} does not divide the {size}-pixel images of {name:?}"
            )));
        }
        let shrink = |ds: &crate::datasets::Dataset| {
            ds.with_images(downscale_upscale(&ds.images, low, size, Resampling::Nearest)?)
        };
        reduced.push((name.clone(), SplitPair { train: shrink(&pair.train)?, test: shrink(&pair.test)? }));
    }
    let plan = SweepPlan { modes: vec![TransferMode::FixedFeature], ..plan.clone() };
    sweep(&plan, registry, &reduced, Some(low), on_phase)
}
