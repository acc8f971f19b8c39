//! `rtl`: pretraining, transfer, sweeps and reports from the command line.
//!
//! Every relative path is resolved against the experiment root (`--root` or
//! `RTL_ROOT`). Exit codes: 0 success, 1 other failure, 2 configuration or
//! plan error, 3 training divergence, 4 missing artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use rtl_core::adversary::{clean_accuracy, robust_accuracy, AttackSpec, Norm};
use rtl_core::datasets::{self, SyntheticSpec};
use rtl_core::harness::{
    append_records, checkpoint_name, expected_run_ids, granularity_experiment, load_pair, pretrain, read_records,
    render_report, run_sweep_with, save_pair, select_epsilon, write_report, ExperimentRecord, PretrainSpec, Registry,
    SweepPlan,
};
use rtl_core::models::{Mode, Network};
use rtl_core::trainer::TrainConfig;
use rtl_core::transfer::{transfer_grid, TransferMode, LR_GRID};
use rtl_core::Error;

#[derive(Parser)]
#[command(name = "rtl", version, about = "Robust-source transfer learning experiments")]
struct Cli {
    /// Experiment root; relative paths resolve against it.
    #[arg(long, env = "RTL_ROOT", default_value = ".", global = true)]
    root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model from a JSON pretraining config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Transfer a checkpoint to a stored dataset.
    Transfer(TransferArgs),
    /// Run a two-phase ε sweep described by a JSON plan.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Render CSV and markdown reports from a record store.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Plan used to check that every expected run is present.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Generate or inspect datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Robust accuracy of a checkpoint under a PGD attack.
    Attack(AttackArgs),
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stored dataset name.
    #[arg(long)]
    dataset: String,
    /// fixed_feature (fixed) or full_network (full).
    #[arg(long)]
    mode: TransferMode,
    #[arg(long, default_value = "datasets")]
    dataset_dir: PathBuf,
    /// JSON training config; defaults to the transfer preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single learning rate instead of the default grid.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the transferred network.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a synthetic dataset from a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "datasets")]
        dataset_dir: PathBuf,
        /// Disables horizontal flips when the dataset is used for training.
        #[arg(long)]
        orientation_sensitive: bool,
    },
    /// Print the header and class balance of a dataset file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    norm: Norm,
    /// Stored dataset name; the test split is attacked.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "datasets")]
    dataset_dir: PathBuf,
    /// Override the number of PGD steps (step size stays 2.5ε/steps).
    #[arg(long)]
    steps: Option<usize>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Plan(_) | Error::Json(_) => 2,
        Error::Divergence { .. } => 3,
        Error::MissingArtifact(_) => 4,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 4,
        _ => 1,
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json values serialize"));
}

fn load_checkpoint(path: &Path) -> Result<Network, Error> {
    let mut net = Network::load(path)?;
    net.set_mode(Mode::Eval);
    Ok(net)
}

fn cmd_pretrain(root: &Path, config: &Path) -> Result<(), Error> {
    let spec: PretrainSpec = read_json(&root.join(config))?;
    let out = pretrain(&spec, root)?;
    print(json!({
        "checkpoint": out.checkpoint,
        "source_accuracy": out.source_accuracy,
        "epochs": out.log.epochs.len(),
        "final_train_accuracy": out.log.final_accuracy(),
        "wall_clock_secs": out.log.wall_clock_secs(),
    }));
    Ok(())
}

fn cmd_transfer(root: &Path, args: &TransferArgs) -> Result<(), Error> {
    let net = load_checkpoint(&root.join(&args.checkpoint))?;
    let pair = load_pair(&root.join(&args.dataset_dir), &args.dataset)?;
    let mut config = match &args.config {
        Some(p) => read_json(&root.join(p))?,
        None => TrainConfig::transfer(LR_GRID[0]),
    };
    if let Some(e) = args.epochs {
        config = config.with_epochs(e);
    }
    config.seed = args.seed;
    config.validate()?;
    let lrs = args.lr.map_or_else(|| LR_GRID.to_vec(), |lr| vec![lr]);
    let out = transfer_grid(&net, &pair, args.mode, &config, args.seed, &lrs)?;
    if let Some(p) = &args.out {
        out.network.save(&root.join(p))?;
    }
    print(json!({
        "dataset": args.dataset,
        "mode": args.mode,
        "metric": out.metric,
        "metric_kind": pair.test.metric_kind,
        "lr": out.lr,
        "seed": args.seed,
    }));
    Ok(())
}

fn cmd_sweep(root: &Path, plan_path: &Path) -> Result<(), Error> {
    let plan: SweepPlan = read_json(&root.join(plan_path))?;
    plan.validate()?;
    let ckpt_dir = root.join(&plan.checkpoint_dir);
    let mut missing = Vec::new();
    for &w in &plan.widths {
        for e in plan.required_epsilons() {
            let p = ckpt_dir.join(checkpoint_name(w, plan.norm, e));
            if !p.exists() {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifact(format!("source checkpoints {}", missing.join(", "))));
    }
    let registry = Registry::load_for(&plan, &ckpt_dir)?;
    let data_dir = root.join(&plan.dataset_dir);
    let mut targets = Vec::new();
    for name in &plan.datasets {
        targets.push((name.clone(), load_pair(&data_dir, name)?));
    }
    let store = root.join(&plan.records);
    if let Some(dir) = store.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut persist = |records: &[ExperimentRecord]| {
        eprintln!("rtl: {} runs finished", records.len());
        append_records(&store, records)
    };
    let mut records = run_sweep_with(&plan, &registry, &targets, &mut persist)?;
    if let Some(low) = plan.granularity_low {
        records.extend(granularity_experiment(&plan, &registry, &targets, low, &mut persist)?);
    }

    let mut chosen = Vec::new();
    let resolutions = std::iter::once(None).chain(plan.granularity_low.map(Some));
    for resolution in resolutions {
        for name in &plan.datasets {
            for &mode in &plan.modes {
                for &width in &plan.widths {
                    if let Some(eps) = select_epsilon(&records, name, mode, width, resolution) {
                        chosen.push(json!({
                            "dataset": name, "mode": mode, "width": width,
                            "resolution": resolution, "epsilon": eps,
                        }));
                    }
                }
            }
        }
    }
    print(json!({ "records": store, "runs": records.len(), "selected": chosen }));
    Ok(())
}

fn cmd_report(root: &Path, records: &Path, out: &Path, plan: Option<&Path>) -> Result<(), Error> {
    let records = read_records(&root.join(records))?;
    let expected = match plan {
        Some(p) => {
            let plan: SweepPlan = read_json(&root.join(p))?;
            Some(expected_run_ids(&plan, &records))
        }
        None => None,
    };
    let report = render_report(&records, expected.as_deref())?;
    let files = write_report(&report, &root.join(out))?;
    print(json!({ "records": records.len(), "files": files }));
    Ok(())
}

fn cmd_dataset(root: &Path, command: &DatasetCommand) -> Result<(), Error> {
    match command {
        DatasetCommand::Gen { spec, name, dataset_dir, orientation_sensitive } => {
            let spec: SyntheticSpec = read_json(&root.join(spec))?;
            let mut pair = spec.generate(name)?;
            if *orientation_sensitive {
                pair.train = pair.train.with_orientation_sensitive(true);
                pair.test = pair.test.with_orientation_sensitive(true);
            }
            let dir = root.join(dataset_dir);
            save_pair(&dir, name, &pair)?;
            let (train, test) = rtl_core::harness::dataset_paths(&dir, name);
            print(json!({
                "train": train, "test": test,
                "train_hash": pair.train.content_hash(),
                "test_hash": pair.test.content_hash(),
            }));
        }
        DatasetCommand::Inspect { path } => {
            let ds = datasets::load(&root.join(path))?;
            print(json!({
                "name": ds.name,
                "split": ds.split,
                "shape": ds.images.shape(),
                "class_count": ds.class_count,
                "class_counts": ds.class_counts(),
                "metric_kind": ds.metric_kind,
                "orientation_sensitive": ds.orientation_sensitive,
                "content_hash": ds.content_hash(),
            }));
        }
    }
    Ok(())
}

fn cmd_attack(root: &Path, args: &AttackArgs) -> Result<(), Error> {
    let net = load_checkpoint(&root.join(&args.checkpoint))?;
    let pair = load_pair(&root.join(&args.dataset_dir), &args.dataset)?;
    let mut spec = AttackSpec::evaluation(args.norm, args.eps);
    if let Some(steps) = args.steps {
        spec.steps = steps;
        spec.step_size = if steps == 0 { 0.0 } else { 2.5 * args.eps / steps as f64 };
    }
    spec.validate()?;
    let clean = clean_accuracy(&net, &pair.test)?;
    let robust = robust_accuracy(&net, &pair.test, &spec)?;
    print(json!({
        "dataset": args.dataset,
        "norm": args.norm,
        "epsilon": args.eps,
        "steps": spec.steps,
        "clean_accuracy": clean,
        "robust_accuracy": robust,
    }));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let root = &cli.root;
    match &cli.command {
        Command::Pretrain { config } => cmd_pretrain(root, config),
        Command::Transfer(args) => cmd_transfer(root, args),
        Command::Sweep { plan } => cmd_sweep(root, plan),
        Command::Report { records, out, plan } => cmd_report(root, records, out, plan.as_deref()),
        Command::Dataset(cmd) => cmd_dataset(root, cmd),
        Command::Attack(args) => cmd_attack(root, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("rtl: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
