//! `crysforge` command line: dataset generation, training, evaluation, and
//! report merging, each leaving a reproducible run manifest behind.
//!
//! Exit codes: 0 success, 1 io failure, 2 usage/validation, 3 numerical
//! abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use crysforge::datagen::{self, DatagenError, GenParams};
use crysforge::io::IoError;
use crysforge::metrics;
use crysforge::train::{
    evaluate, predict_all, refine_with_predictions, train, ModelKind, TrainConfig, TrainError,
    TrainedModel,
};

mod manifest;
use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "crysforge",
    version,
    about = "Patterson-map to electron-density pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural dataset directory.
    Gen(GenArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Merge evaluation runs into one plot-ready CSV.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct GenArgs {
    /// Number of examples to generate.
    #[arg(long)]
    n: usize,
    /// Residues per molecule (J).
    #[arg(long, default_value_t = 2)]
    residues: usize,
    /// Resolution cutoff in Angstroms.
    #[arg(long, default_value_t = 1.5)]
    dmin: f64,
    /// Minimum periodic-image contact in Angstroms.
    #[arg(long = "min-contact", default_value_t = 2.75)]
    min_contact: f64,
    /// Grid oversampling factor.
    #[arg(long, default_value_t = 3.0)]
    oversample: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop shape bins smaller than this.
    #[arg(long = "min-batch", default_value_t = 1)]
    min_batch: usize,
    /// Fixed unit cell "A,B,C" instead of per-example fitting.
    #[arg(long = "fixed-cell", value_parser = parse_cell)]
    fixed_cell: Option<(f64, f64, f64)>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_cell(s: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected three comma-separated edges, e.g. 41,30,24".into());
    }
    let mut v = [0.0f64; 3];
    for (i, p) in parts.iter().enumerate() {
        v[i] = p.trim().parse::<f64>().map_err(|e| e.to_string())?;
        if v[i] <= 0.0 {
            return Err("cell edges must be positive".into());
        }
    }
    Ok((v[0], v[1], v[2]))
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Crysformer,
    Unet,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    model: ModelArg,
    /// Stack partial-structure channels (U-Net only).
    #[arg(long)]
    ps: bool,
    /// Prior checkpoint for a refining run (+R).
    #[arg(long)]
    refine: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report label; defaults to the model kind plus +ps/+r suffixes.
    #[arg(long)]
    label: Option<String>,
    /// Record real wall-clock seconds in history.csv instead of zeros.
    #[arg(long = "wall-clock")]
    wall_clock: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint from `train`.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Prior checkpoint; required when evaluating a refined model.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Report label override.
    #[arg(long)]
    label: Option<String>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Evaluation run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

/// Failure carrying the process exit code.
enum CliError {
    Io(String),
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Io(m) | CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::Io(e.to_string()),
            IoError::Parse { .. } => CliError::Usage(e.to_string()),
        }
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::Io(io) => io.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Io(io) => io.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    if args.n == 0 || args.residues == 0 || args.dmin <= 0.0 || args.oversample <= 0.0 {
        return Err(CliError::Usage(
            "--n, --residues, --dmin, --oversample must be positive".into(),
        ));
    }
    let started = now_ms();
    let params = GenParams {
        residues: args.residues,
        d_min: args.dmin,
        min_contact: args.min_contact,
        oversampling: args.oversample,
        fixed_cell: args.fixed_cell,
    };
    let examples = datagen::generate_dataset(args.seed, args.n, &params)?;
    let manifest =
        datagen::write_dataset(&examples, &args.out, args.seed, &params, args.min_batch)?;

    let kept: usize = manifest.bins.iter().map(|b| b.count).sum();
    println!(
        "wrote {kept} examples ({} bins, spacing {:.3} A) to {}",
        manifest.bins.len(),
        args.dmin / args.oversample,
        args.out.display()
    );
    for bin in &manifest.bins {
        println!(
            "  bin {}x{}x{}: {} examples",
            bin.dims[0], bin.dims[1], bin.dims[2], bin.count
        );
    }

    let run = RunManifest {
        command: "gen".into(),
        label: format!("gen-seed{}", args.seed),
        seed: args.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        config: serde_json::json!({
            "n": args.n,
            "residues": args.residues,
            "d_min": args.dmin,
            "min_contact": args.min_contact,
            "oversampling": args.oversample,
            "min_batch": args.min_batch,
            "fixed_cell": args.fixed_cell,
            "spacing": args.dmin / args.oversample,
        }),
        outputs: vec!["manifest.json".into()],
        summary: serde_json::json!({ "examples": kept, "bins": manifest.bins.len() }),
    };
    run.write(&args.out)?;
    Ok(())
}

struct LoadedData {
    examples: Vec<crysforge::datagen::Example>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    d_min: f64,
}

fn load_data(dir: &Path) -> Result<LoadedData, CliError> {
    let ds = datagen::read_dataset(dir)?;
    let (train_idx, test_idx) = datagen::train_test_split(&ds.examples);
    Ok(LoadedData {
        examples: ds.examples,
        train_idx,
        test_idx,
        d_min: ds.manifest.d_min,
    })
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    if args.epochs == 0 || args.batch == 0 || args.lr <= 0.0 {
        return Err(CliError::Usage(
            "--epochs, --batch, --lr must be positive".into(),
        ));
    }
    let started = now_ms();
    let data = load_data(&args.data)?;
    let train_set: Vec<&_> = data.train_idx.iter().map(|&i| &data.examples[i]).collect();
    let eval_set: Vec<&_> = if data.test_idx.is_empty() {
        println!("note: test split is empty; evaluating on the training set");
        train_set.clone()
    } else {
        data.test_idx.iter().map(|&i| &data.examples[i]).collect()
    };
    if train_set.is_empty() {
        return Err(CliError::Usage("training split is empty".into()));
    }

    let mut cfg = TrainConfig::new(match args.model {
        ModelArg::Crysformer => ModelKind::CrysFormer,
        ModelArg::Unet => ModelKind::Unet,
    });
    cfg.ps = args.ps;
    cfg.epochs = args.epochs;
    cfg.batch_size = args.batch;
    cfg.lr = args.lr;
    cfg.seed = args.seed;
    cfg.deterministic_timing = !args.wall_clock;
    if args.ps && cfg.kind == ModelKind::CrysFormer {
        // Partial structures reach the CrysFormer through attention either
        // way; the flag only changes U-Net input stacking.
        println!("note: --ps has no effect on crysformer; partial structures always attend");
    }

    let (model, history) = match &args.refine {
        None => train::<f32>(&cfg, &train_set, &eval_set, None)?,
        Some(prior_path) => {
            let prior = TrainedModel::<f32>::load(prior_path)?;
            if prior.wants_prior() {
                return Err(CliError::Usage(
                    "refining on top of an already-refined checkpoint is not supported".into(),
                ));
            }
            let prior_train = predict_all(&prior, &train_set, None)?;
            let prior_eval = predict_all(&prior, &eval_set, None)?;
            cfg.refine = true;
            refine_with_predictions(&cfg, (&train_set, &eval_set), (prior_train, prior_eval))?
        }
    };

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", args.out.display())))?;
    let ckpt = args.out.join("checkpoint.crys");
    model.save(&ckpt)?;
    write_file(&args.out.join("history.csv"), &history.to_csv())?;

    for r in &history.rows {
        println!(
            "epoch {:4}  train_loss {:.6}  test_pearson {:.4}",
            r.epoch, r.train_loss, r.test_pearson
        );
    }
    println!("checkpoint: {}", ckpt.display());

    let finished = now_ms();
    let epochs_run = history.rows.len();
    let run = RunManifest {
        command: "train".into(),
        label: args.label.clone().unwrap_or_else(|| cfg.label()),
        seed: args.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: finished,
        config: serde_json::json!({
            "data": args.data.display().to_string(),
            "model": cfg.label(),
            "ps": args.ps,
            "refine": args.refine.as_ref().map(|p| p.display().to_string()),
            "epochs": args.epochs,
            "batch": args.batch,
            "lr": args.lr,
        }),
        outputs: vec!["checkpoint.crys".into(), "history.csv".into()],
        summary: serde_json::json!({
            "epochs_run": epochs_run,
            "updates": history.updates,
            "final_train_loss": history.rows.last().map(|r| r.train_loss),
            "final_test_pearson": history.final_pearson(),
            "seconds_per_epoch":
                (finished - started) as f64 / 1000.0 / epochs_run.max(1) as f64,
        }),
    };
    run.write(&args.out)?;
    Ok(())
}

fn format_d(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let started = now_ms();
    let data = load_data(&args.data)?;
    let indices: Vec<usize> = match args.split {
        SplitArg::Test => data.test_idx.clone(),
        SplitArg::Train => data.train_idx.clone(),
        SplitArg::All => (0..data.examples.len()).collect(),
    };
    if indices.is_empty() {
        return Err(CliError::Usage("selected split is empty".into()));
    }
    let set: Vec<&_> = indices.iter().map(|&i| &data.examples[i]).collect();

    let model = TrainedModel::<f32>::load(&args.ckpt)?;
    check_compatibility(&model, set[0])?;
    let priors = if model.wants_prior() {
        let prior_path = args.prior.as_ref().ok_or_else(|| {
            CliError::Usage("checkpoint expects a prior channel; pass --prior".into())
        })?;
        let prior = TrainedModel::<f32>::load(prior_path)?;
        if prior.wants_prior() {
            return Err(CliError::Usage(
                "prior checkpoint must not itself be refined".into(),
            ));
        }
        check_compatibility(&prior, set[0])?;
        Some(predict_all(&prior, &set, None)?)
    } else {
        None
    };

    let summary = evaluate(&model, &set, priors.as_deref(), data.d_min)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", args.out.display())))?;

    let mut per_example = String::from("id,pearson,mean_phase_error,mean_phase_error_unweighted\n");
    for r in &summary.rows {
        per_example.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.id, r.pearson, r.phase_error_deg, r.phase_error_unweighted_deg
        ));
    }
    write_file(&args.out.join("per_example.csv"), &per_example)?;

    let fractions = metrics::fraction_below(&summary.reports, 60.0)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut shells_csv = String::from("d_hi,d_lo,mean_error,count,fraction_below_60\n");
    for (s, shell) in summary.shells.iter().enumerate() {
        let mut err_sum = 0.0;
        let mut err_n = 0usize;
        let mut count = 0usize;
        for rep in &summary.reports {
            if let Some(e) = rep.shells[s].mean_error_deg {
                err_sum += e;
                err_n += 1;
            }
            count += rep.shells[s].count;
        }
        let mean = if err_n > 0 {
            format!("{:.6}", err_sum / err_n as f64)
        } else {
            "nan".into()
        };
        let frac = match fractions[s] {
            Some(f) => format!("{f:.6}"),
            None => "nan".into(),
        };
        shells_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            format_d(shell.d_hi),
            format_d(shell.d_lo),
            mean,
            count,
            frac
        ));
    }
    write_file(&args.out.join("shells.csv"), &shells_csv)?;

    println!(
        "mean_pearson {:.6}  mean_phase_error {:.4} deg over {} examples",
        summary.mean_pearson,
        summary.mean_phase_error_deg,
        summary.rows.len()
    );

    // Pull the training run context sitting next to the checkpoint, when
    // present, so reports can show epochs and time per epoch.
    let train_run = args
        .ckpt
        .parent()
        .map(|d| d.join("run.json"))
        .filter(|p| p.exists())
        .and_then(|p| RunManifest::read(&p).ok());
    let label = args
        .label
        .clone()
        .or_else(|| train_run.as_ref().map(|r| r.label.clone()))
        .unwrap_or_else(|| "eval".into());

    let run = RunManifest {
        command: "eval".into(),
        label,
        seed: 0,
        version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        config: serde_json::json!({
            "ckpt": args.ckpt.display().to_string(),
            "data": args.data.display().to_string(),
            "split": match args.split {
                SplitArg::Test => "test",
                SplitArg::Train => "train",
                SplitArg::All => "all",
            },
            "prior": args.prior.as_ref().map(|p| p.display().to_string()),
        }),
        outputs: vec!["per_example.csv".into(), "shells.csv".into()],
        summary: serde_json::json!({
            "examples": summary.rows.len(),
            "mean_pearson": summary.mean_pearson,
            "mean_phase_error_deg": summary.mean_phase_error_deg,
            "epochs_run": train_run.as_ref().and_then(|r| r.summary.get("epochs_run").cloned()),
            "seconds_per_epoch":
                train_run.as_ref().and_then(|r| r.summary.get("seconds_per_epoch").cloned()),
        }),
    };
    run.write(&args.out)?;
    Ok(())
}

fn check_compatibility(
    model: &TrainedModel<f32>,
    example: &crysforge::datagen::Example,
) -> Result<(), CliError> {
    let j = example.partials.len();
    match model {
        TrainedModel::CrysFormer(m) => {
            if j > m.cfg.j_max {
                return Err(CliError::Usage(format!(
                    "dataset has {j} partial structures per example, checkpoint accepts {}",
                    m.cfg.j_max
                )));
            }
            if m.cfg.tokens_for(example.dims()).is_err() {
                return Err(CliError::Usage(format!(
                    "dataset dims {:?} incompatible with checkpoint (patch {:?}, s_max {})",
                    example.dims(),
                    m.cfg.patch,
                    m.cfg.s_max
                )));
            }
        }
        TrainedModel::Unet(u) => {
            if u.cfg.ps_channels > 0 && u.cfg.ps_channels != j {
                return Err(CliError::Usage(format!(
                    "checkpoint expects {} partial channels, dataset has {j}",
                    u.cfg.ps_channels
                )));
            }
        }
    }
    Ok(())
}

struct ShellRow {
    d_hi: String,
    d_lo: String,
    mean_error: String,
    fraction: String,
}

fn read_shells_csv(path: &Path) -> Result<Vec<ShellRow>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "d_hi,d_lo,mean_error,count,fraction_below_60" {
                return Err(CliError::Usage(format!(
                    "{}: unexpected header",
                    path.display()
                )));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(CliError::Usage(format!(
                "{}: malformed row {i}",
                path.display()
            )));
        }
        rows.push(ShellRow {
            d_hi: parts[0].to_string(),
            d_lo: parts[1].to_string(),
            mean_error: parts[2].to_string(),
            fraction: parts[4].to_string(),
        });
    }
    Ok(rows)
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let mut merged = String::from("label,d_hi,d_lo,mean_error,fraction_below_60\n");
    let mut layout: Option<Vec<(String, String)>> = None;
    let mut table: Vec<(String, f64, f64, String, String)> = Vec::new();

    for dir in &args.runs {
        let run = RunManifest::read(&dir.join("run.json"))
            .map_err(|e| CliError::Usage(format!("{}: {}", dir.display(), e.message())))?;
        let shells = read_shells_csv(&dir.join("shells.csv"))?;
        let this_layout: Vec<(String, String)> = shells
            .iter()
            .map(|s| (s.d_hi.clone(), s.d_lo.clone()))
            .collect();
        match &layout {
            None => layout = Some(this_layout),
            Some(l) if *l != this_layout => {
                return Err(CliError::Usage(format!(
                    "{}: shell layout differs from the first run",
                    dir.display()
                )));
            }
            _ => {}
        }
        for s in &shells {
            merged.push_str(&format!(
                "{},{},{},{},{}\n",
                run.label, s.d_hi, s.d_lo, s.mean_error, s.fraction
            ));
        }
        let mp = run
            .summary
            .get("mean_pearson")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::NAN);
        let me = run
            .summary
            .get("mean_phase_error_deg")
            .and_then(|v| v.as_f64())
            .unwrap_or(f64::NAN);
        let epochs = run
            .summary
            .get("epochs_run")
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into());
        let spe = run
            .summary
            .get("seconds_per_epoch")
            .and_then(|v| v.as_f64())
            .map(|v| format!("{v:.2}"))
            .unwrap_or_else(|| "-".into());
        table.push((run.label.clone(), mp, me, epochs, spe));
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    write_file(&args.out, &merged)?;

    println!(
        "{:<16} {:>12} {:>20} {:>8} {:>14}",
        "method", "mean_pearson", "mean_phase_error_deg", "epochs", "sec_per_epoch"
    );
    for (label, mp, me, epochs, spe) in &table {
        println!("{label:<16} {mp:>12.4} {me:>20.2} {epochs:>8} {spe:>14}");
    }
    println!("report: {}", args.out.display());
    Ok(())
}
