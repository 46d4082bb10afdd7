//! `topocnn` — train, evaluate and prune topographically regularized CNNs.

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use topocnn::checkpoint::{self, write_atomic};
use topocnn::data::{self, make_splits, synthetic, Dataset, Split, Splits};
use topocnn::gradcheck::{objective_suite, op_suite, CheckResult, GradCheckConfig};
use topocnn::models::ModelSpec;
use topocnn::pruning::{prune_sweep, summarize, sweep_csv, CheckpointPair, PruneOptions};
use topocnn::trainer::{evaluate, train, EpochMetrics};
use topocnn::{Model, Scalar, Scheme};

use config::{DTypeName, DatasetName, RunConfig, CONFIG_KEYS};

/// Failure with its exit code: 2 config/usage, 3 data, 4 checkpoint, 1 anything else.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn config(e: impl fmt::Display) -> Self {
        Failure { code: 2, err: anyhow!("config: {e}") }
    }
    fn data(e: impl fmt::Display) -> Self {
        Failure { code: 3, err: anyhow!("data: {e}") }
    }
    fn checkpoint(e: impl fmt::Display) -> Self {
        Failure { code: 4, err: anyhow!("checkpoint: {e}") }
    }
    fn other(e: impl fmt::Display) -> Self {
        Failure { code: 1, err: anyhow!("{e}") }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "topocnn", version, about = "Topographically regularized CNN training on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes checkpoint, sidecar and metrics.
    #[command(after_help = CONFIG_KEYS)]
    Train(TrainArgs),
    /// Accuracy of a checkpoint on one split of the data it was trained with.
    #[command(after_help = CONFIG_KEYS)]
    Evaluate(EvalArgs),
    /// Test accuracy of baseline/topographic checkpoint pairs under channel pruning.
    PruneSweep(SweepArgs),
    /// Write channel positions of a layout scheme as CSV and JSON.
    ExportLayout(LayoutArgs),
    /// Run the double-precision finite-difference gradient suite.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (flat TOML, keys below).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides `data_root`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file (`.tpgr`); its `.json` sidecar supplies the run config.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Baseline checkpoints; the i-th pairs with the i-th `--topographic`.
    #[arg(long, required = true)]
    baseline: Vec<PathBuf>,
    #[arg(long, required = true)]
    topographic: Vec<PathBuf>,
    /// Comma-separated prune fractions in [0, 1).
    #[arg(long, value_delimiter = ',', required = true)]
    fractions: Vec<f64>,
    /// Directory for `sweep.csv` and `sweep_summary.json`.
    #[arg(long)]
    output: PathBuf,
    /// Leave the batch-norm shift of pruned channels in place.
    #[arg(long)]
    keep_bn_beta: bool,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct LayoutArgs {
    #[arg(long)]
    scheme: Scheme,
    #[arg(long)]
    channels: usize,
    /// Output prefix; writes PREFIX.csv and PREFIX.json. Without it the CSV goes to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 6)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Topographic weight in the full objective.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Maximum relative error accepted.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

/// JSON written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Sidecar {
    model_kind: String,
    dtype: DTypeName,
    model: ModelSpec,
    config: RunConfig,
    best_epoch: Option<usize>,
    best_val_acc: Option<f64>,
    test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diverged: Option<String>,
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::PruneSweep(a) => cmd_prune_sweep(a),
        Command::ExportLayout(a) => cmd_export_layout(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn load_datasets(cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let root = || {
        cfg.data_root().ok_or_else(|| {
            Failure::data(format!("no data root: set `data_root` or ${}", config::DATA_ROOT_ENV))
        })
    };
    let (dev, test) = match cfg.dataset {
        DatasetName::Synthetic => synthetic::generate(&cfg.synthetic_spec()).map_err(Failure::config)?,
        DatasetName::Cifar10 => {
            let r = root()?;
            let nested = r.join("cifar-10-batches-bin");
            data::load_cifar10(if nested.is_dir() { &nested } else { &r }).map_err(Failure::data)?
        }
        DatasetName::Mnist => {
            let r = root()?;
            let nested = r.join("mnist");
            data::load_mnist(if nested.is_dir() { &nested } else { &r }).map_err(Failure::data)?
        }
    };
    let (c, size) = cfg.input_geometry();
    if dev.channels != c || dev.height != size || dev.width != size {
        return Err(Failure::data(format!(
            "images are {}×{}×{}, expected {c}×{size}×{size}",
            dev.channels, dev.height, dev.width
        )));
    }
    Ok((dev, test))
}

fn load_splits(cfg: &RunConfig) -> Outcome<Splits> {
    let (dev, test) = load_datasets(cfg)?;
    make_splits(&dev, &test, cfg.caps(), cfg.split_seed).map_err(Failure::config)
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let mut cfg = RunConfig::load(&args.config).map_err(Failure::config)?;
    if let Some(o) = args.output {
        cfg.output_dir = o;
    }
    if let Some(r) = args.data_root {
        cfg.data_root = Some(r);
    }
    let splits = load_splits(&cfg)?;
    match cfg.dtype {
        DTypeName::F32 => train_with::<f32>(&cfg, &splits, args.quiet),
        DTypeName::F64 => train_with::<f64>(&cfg, &splits, args.quiet),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, splits: &Splits, quiet: bool) -> Outcome {
    let tc = cfg.train_config();
    let model = Model::<T>::new(cfg.model_spec(), cfg.seed).map_err(Failure::config)?;
    let out = &cfg.output_dir;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes()).map_err(Failure::other)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut lines = String::new();
    let mut write_err = None;
    let outcome = train(model, splits, &tc, &mut |m: &EpochMetrics| {
        lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        lines.push('\n');
        if let Err(e) = write_atomic(&metrics_path, lines.as_bytes()) {
            write_err.get_or_insert(e);
        }
        if !quiet {
            eprintln!(
                "epoch {:>3}  lr {:.5}  train_acc {:.4}  val_acc {:.4}  classif {:.4}  topo {:.4}",
                m.epoch, m.lr, m.train_acc, m.val_acc, m.classif_loss, m.topo_loss_mean
            );
        }
    })
    .map_err(|e| match e {
        topocnn::Error::InvalidArgument(_) => Failure::config(e),
        other => Failure::other(other),
    })?;
    if let Some(e) = write_err {
        return Err(Failure::other(e));
    }
    let state = &outcome.state;
    let best = state.best_model();
    let test_acc = evaluate(best, &splits.test, tc.batch_size).map_err(Failure::other)?.accuracy;
    let ckpt = out.join("checkpoint.tpgr");
    checkpoint::save(&ckpt, &best.state()).map_err(Failure::other)?;
    let sidecar = Sidecar {
        model_kind: tc.model_kind().into(),
        dtype: cfg.dtype,
        model: cfg.model_spec(),
        config: cfg.clone(),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_val_acc: state.best.as_ref().map(|b| b.val_acc),
        test_acc: Some(test_acc),
        diverged: outcome.diverged.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path(&ckpt), json.as_bytes()).map_err(Failure::other)?;
    if let Some(msg) = outcome.diverged {
        return Err(Failure::other(format!("training diverged ({msg}); last good checkpoint written to {}", ckpt.display())));
    }
    println!("{}", serde_json::json!({
        "checkpoint": ckpt,
        "model_kind": sidecar.model_kind,
        "best_epoch": sidecar.best_epoch,
        "best_val_acc": sidecar.best_val_acc,
        "test_acc": test_acc,
    }));
    Ok(())
}

fn read_sidecar(ckpt: &Path) -> Outcome<Sidecar> {
    let path = sidecar_path(ckpt);
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::checkpoint(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::checkpoint(format!("{}: {e}", path.display())))
}

fn load_model<T: Scalar>(ckpt: &Path, side: &Sidecar) -> Outcome<Model<T>> {
    let mut model = Model::<T>::new(side.model.clone(), 0).map_err(Failure::checkpoint)?;
    let state = checkpoint::load::<T>(ckpt).map_err(Failure::checkpoint)?;
    model.load_state(&state).map_err(Failure::checkpoint)?;
    Ok(model)
}

fn pick(splits: &Splits, which: SplitArg) -> &Split {
    match which {
        SplitArg::Train => &splits.train,
        SplitArg::Val => &splits.val,
        SplitArg::Test => &splits.test,
    }
}

fn cmd_evaluate(args: EvalArgs) -> Outcome {
    let side = read_sidecar(&args.checkpoint)?;
    let mut cfg = side.config.clone();
    if let Some(r) = args.data_root {
        cfg.data_root = Some(r);
    }
    let splits = load_splits(&cfg)?;
    let split = pick(&splits, args.split);
    let report = match side.dtype {
        DTypeName::F32 => evaluate(&load_model::<f32>(&args.checkpoint, &side)?, split, cfg.batch_size),
        DTypeName::F64 => evaluate(&load_model::<f64>(&args.checkpoint, &side)?, split, cfg.batch_size),
    }
    .map_err(Failure::other)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_prune_sweep(args: SweepArgs) -> Outcome {
    if args.baseline.len() != args.topographic.len() {
        return Err(Failure::config("--baseline and --topographic must be given the same number of times"));
    }
    if args.fractions.is_empty() {
        return Err(Failure::config("--fractions: empty list"));
    }
    if let Some(f) = args.fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Failure::config(format!("--fractions: {f} is outside [0, 1)")));
    }
    let mut sides = Vec::new();
    for (b, t) in args.baseline.iter().zip(&args.topographic) {
        let (sb, st) = (read_sidecar(b)?, read_sidecar(t)?);
        if sb.dtype != st.dtype || sb.dtype != sides.first().map_or(sb.dtype, |(x, _): &(Sidecar, Sidecar)| x.dtype) {
            return Err(Failure::checkpoint("all checkpoints must share one dtype"));
        }
        let data_key = |c: &RunConfig| (c.dataset, c.train_cap, c.val_cap, c.test_cap, c.split_seed, c.synthetic_seed);
        if data_key(&sb.config) != data_key(&st.config) {
            return Err(Failure::checkpoint(format!("{} and {} were trained on different data", b.display(), t.display())));
        }
        sides.push((sb, st));
    }
    let mut cfg = sides[0].1.config.clone();
    if let Some(r) = args.data_root.clone() {
        cfg.data_root = Some(r);
    }
    let splits = load_splits(&cfg)?;
    let opts = PruneOptions { zero_bn_beta: !args.keep_bn_beta };
    let rows = match sides[0].0.dtype {
        DTypeName::F32 => sweep_with::<f32>(&args, &sides, &splits, opts)?,
        DTypeName::F64 => sweep_with::<f64>(&args, &sides, &splits, opts)?,
    };
    write_atomic(&args.output.join("sweep.csv"), sweep_csv(&rows).as_bytes()).map_err(Failure::other)?;
    let summary = serde_json::to_string_pretty(&summarize(&rows)).expect("summary serializes");
    write_atomic(&args.output.join("sweep_summary.json"), summary.as_bytes()).map_err(Failure::other)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn sweep_with<T: Scalar>(
    args: &SweepArgs,
    sides: &[(Sidecar, Sidecar)],
    splits: &Splits,
    opts: PruneOptions,
) -> Outcome<Vec<topocnn::pruning::SweepRow>> {
    let mut models = Vec::new();
    for ((b, t), (sb, st)) in args.baseline.iter().zip(&args.topographic).zip(sides) {
        models.push((st.config.seed, load_model::<T>(b, sb)?, load_model::<T>(t, st)?));
    }
    let pairs: Vec<CheckpointPair<'_, T>> =
        models.iter().map(|(seed, b, t)| CheckpointPair { seed: *seed, baseline: b, topographic: t }).collect();
    prune_sweep(&pairs, &args.fractions, &splits.test, args.batch_size, opts).map_err(|e| match e {
        topocnn::Error::Checkpoint(_) => Failure::checkpoint(e),
        other => Failure::other(other),
    })
}

fn cmd_export_layout(args: LayoutArgs) -> Outcome {
    let layout = args.scheme.layout(args.channels).map_err(Failure::config)?;
    match args.output {
        Some(prefix) => {
            let csv = PathBuf::from(format!("{}.csv", prefix.display()));
            let json = PathBuf::from(format!("{}.json", prefix.display()));
            write_atomic(&csv, layout.to_csv().as_bytes()).map_err(Failure::other)?;
            let text = serde_json::to_string_pretty(&layout.to_json()).expect("layout serializes");
            write_atomic(&json, text.as_bytes()).map_err(Failure::other)?;
        }
        None => print!("{}", layout.to_csv()),
    }
    Ok(())
}

fn report(r: &CheckResult) {
    println!(
        "{:<6} {:<28} max_rel_err {:.3e}  checked {:>4}  kinks skipped {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.max_rel_error,
        r.checked,
        r.skipped_kinks
    );
}

fn cmd_gradcheck(args: GradArgs) -> Outcome {
    let cfg = GradCheckConfig { samples_per_tensor: args.samples.max(1), seed: args.seed, tolerance: args.tolerance, ..Default::default() };
    let mut results = op_suite(&cfg).map_err(Failure::other)?;
    results.extend(objective_suite(&cfg, args.lambda).map_err(Failure::other)?);
    results.iter().for_each(report);
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::other(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
