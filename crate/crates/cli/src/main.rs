use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use taf_core::data::{gen_clips, read_dataset, write_dataset, DataError, Dataset, GenParams};
use taf_core::engine::ablate::{self, AblationKind, Runner};
use taf_core::engine::{
    evaluate_with, train, write_metrics_csv, AttenuationMode, EngineError, Mode, SwapSpec, TrainConfig,
    TrainOptions,
};
use taf_core::model::{load_checkpoint, CheckpointError, FactorizedModel};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Engine(EngineError::NonFinite { .. }) => 4,
            CliError::Engine(e) if e.is_config() => 2,
            CliError::Checkpoint(CheckpointError::Mismatch(_)) => 2,
            CliError::Engine(EngineError::Data(DataError::OffsetOutOfClip { .. })) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Temporally-adaptive feature learning on synthetic video clips.
#[derive(Debug, Parser)]
#[command(name = "taf", version)]
struct Cli {
    /// Base directory for every relative path argument.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Parallel workers for generation, evaluation and ablation runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overwrite existing non-empty output directories.
    #[arg(long, global = true)]
    force: bool,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a MovingShapes dataset with train and val splits.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on key frames.
    Eval(EvalArgs),
    /// Run one of the ablation studies.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clips: usize,
    #[arg(long, default_value_t = 15)]
    half_len: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, env = "TAF_SEED", default_value_t = 0)]
    seed: u64,
    /// Relative share of clips in the train split.
    #[arg(long = "train", default_value_t = 1.0)]
    train_frac: f64,
    /// Relative share of clips in the val split.
    #[arg(long = "val", default_value_t = 0.0)]
    val_frac: f64,
    /// Skip per-frame ground truth (needed only by the class-rate study).
    #[arg(long)]
    no_gt: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory, or a training output directory (uses best/, else final/).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// 1-based branch whose features come from the offset frame.
    #[arg(long, requires = "swap_offset")]
    swap_branch: Option<usize>,
    #[arg(long, requires = "swap_branch", allow_hyphen_values = true)]
    swap_offset: Option<i64>,
    /// Write the metrics CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// change-rate, context, swap-curve, attenuate or class-rate.
    kind: AblationKind,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Comma-separated sweep values; defaults depend on the study.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    sweep: Vec<f64>,
    /// 1-based branch for swap-curve and attenuate.
    #[arg(long, default_value_t = 1)]
    branch: usize,
    /// Attenuation mode: zeros or sample_mean.
    #[arg(long, default_value = "zeros")]
    mode: AttenuationMode,
    /// class-rate: ground truth only, no trained models.
    #[arg(long)]
    gt_only: bool,
    /// Also write a gnuplot script for the summary.
    #[arg(long)]
    gnuplot: bool,
    #[arg(long)]
    out: PathBuf,
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::Usage(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    if a.clips == 0 {
        return Err(CliError::Usage("--clips must be at least 1".into()));
    }
    if !(a.train_frac >= 0.0 && a.val_frac >= 0.0 && a.train_frac + a.val_frac > 0.0) {
        return Err(CliError::Usage("--train and --val must be non-negative and not both zero".into()));
    }
    let out = resolve(&cli.workdir, &a.out);
    let params = GenParams {
        height: a.size,
        width: a.size,
        classes: a.classes,
        half_len: a.half_len,
        render_gt: !a.no_gt,
        ..GenParams::default()
    };
    params.validate()?;
    prepare_out_dir(&out, cli.force)?;
    let n_train = ((a.clips as f64 * a.train_frac / (a.train_frac + a.val_frac)).round() as usize).min(a.clips);
    let n_val = a.clips - n_train;
    // Clip k is seeded with seed + k, so the splits never share a seed.
    for (name, first, count) in [("train", 0, n_train), ("val", n_train, n_val)] {
        if count == 0 {
            continue;
        }
        let clips = gen_clips(&params, first, count, a.seed, cli.jobs)?;
        write_dataset(&clips, out.join(name))?;
        println!(
            "{name}: {count} clips of {} frames, {}x{}, {} classes, clip ids {first}..{}",
            params.frames(),
            a.size,
            a.size,
            a.classes,
            first + count
        );
    }
    Ok(())
}

/// Reads `DIR/<split>`, or `DIR` itself when it holds a manifest.
fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    if dir.join("manifest.txt").is_file() {
        return Ok(read_dataset(dir)?);
    }
    Ok(read_dataset(dir.join(split))?)
}

fn load_val(dir: &Path) -> Result<Option<Dataset>> {
    let v = dir.join("val");
    if v.join("manifest.txt").is_file() {
        Ok(Some(read_dataset(v)?))
    } else {
        Ok(None)
    }
}

fn build_config(
    cli: &Cli,
    config: Option<&Path>,
    overrides: &[String],
    mode: Option<Mode>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut keys = Vec::new();
    if let Some(p) = config {
        let p = resolve(&cli.workdir, p);
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        keys = cfg
            .apply_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
    }
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
        keys.push(k.trim().to_string());
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    match seed {
        Some(s) => cfg.seed = s,
        None if !keys.iter().any(|k| k == "seed") => {
            if let Ok(s) = std::env::var("TAF_SEED") {
                cfg.seed = s
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("TAF_SEED={s:?} is not an integer")))?;
            }
        }
        None => {}
    }
    if cfg.mode == Mode::Baseline && keys.iter().any(|k| k.starts_with("taf.")) {
        log::warn!("baseline mode: taf.* keys are ignored and lambda is forced to 0");
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = build_config(cli, a.config.as_deref(), &a.overrides, a.mode, a.seed)?;
    let data = resolve(&cli.workdir, &a.data);
    let ds = load_split(&data, "train")?;
    let val = load_val(&data)?;
    let out = resolve(&cli.workdir, &a.out);
    prepare_out_dir(&out, cli.force)?;
    let outcome = train(
        &cfg,
        &ds,
        &TrainOptions {
            val: val.as_ref(),
            out_dir: Some(&out),
            jobs: cli.jobs,
        },
    )?;
    let last = outcome.log.last().expect("at least one step");
    println!(
        "trained {} ({} mode, seed {}) for {} steps; final ce {:.4}, total {:.4}",
        cfg.arch,
        cfg.mode,
        cfg.seed,
        outcome.log.len(),
        last.ce,
        last.total
    );
    if let Some((epoch, miou, _)) = &outcome.best {
        println!("best val miou {miou:.4} at epoch {epoch}");
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn resolve_ckpt(p: &Path) -> PathBuf {
    if p.join("model.txt").is_file() {
        p.to_path_buf()
    } else if p.join("best").is_dir() {
        p.join("best")
    } else {
        p.join("final")
    }
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ds = load_split(&resolve(&cli.workdir, &a.data), &a.split)?;
    let ckpt = resolve_ckpt(&resolve(&cli.workdir, &a.ckpt));
    let model: FactorizedModel<f32> = load_checkpoint(&ckpt)?;
    let swap = match (a.swap_branch, a.swap_offset) {
        (Some(0), _) => return Err(CliError::Usage("--swap-branch is 1-based".into())),
        (Some(b), Some(offset)) => Some(SwapSpec { branch: b - 1, offset }),
        _ => None,
    };
    let m = evaluate_with(&model, &ds, swap, cli.jobs)?;
    match &a.out {
        Some(p) => {
            let p = resolve(&cli.workdir, p);
            write_metrics_csv(&p, &m)?;
            println!("miou {:.4}, pixel_acc {:.4}; written to {}", m.miou, m.pixel_acc, p.display());
        }
        None => {
            println!("class,iou");
            for (c, v) in m.per_class_iou.iter().enumerate() {
                println!("{c},{}", v.map_or(String::new(), |v| v.to_string()));
            }
            println!("miou,{}\npixel_acc,{}", m.miou, m.pixel_acc);
        }
    }
    Ok(())
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let base = build_config(cli, a.config.as_deref(), &a.overrides, None, None)?;
    let data = resolve(&cli.workdir, &a.data);
    let train_ds = load_split(&data, "train")?;
    let val = load_val(&data)?.ok_or_else(|| {
        CliError::Usage(format!("{} has no val split; ablations select and score on val", data.display()))
    })?;
    let out = resolve(&cli.workdir, &a.out);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let runner = Runner::new(base.clone(), &train_ds, &val)
        .with_jobs(cli.jobs)
        .with_archive(out.join("runs"));
    let sweep = if a.sweep.is_empty() {
        a.kind.default_sweep()
    } else {
        a.sweep.clone()
    };
    if a.branch == 0 {
        return Err(CliError::Usage("--branch is 1-based".into()));
    }
    let branch = a.branch - 1;
    let rows = match a.kind {
        AblationKind::ChangeRate => ablate::change_rate(&runner, &sweep, &a.seeds)?,
        AblationKind::Context => ablate::context(&runner, &sweep, &a.seeds)?,
        AblationKind::SwapCurve => ablate::swap_curve(&runner, &sweep, &a.seeds, branch)?,
        AblationKind::Attenuate => ablate::attenuate(&runner, &a.seeds, branch, a.mode)?,
        AblationKind::ClassRate => ablate::class_rate(&runner, &sweep, &a.seeds, !a.gt_only)?,
    };
    let name = a.kind.to_string();
    let rows_path = out.join(format!("{name}.csv"));
    ablate::write_rows_csv(&rows_path, &rows)?;
    let summary = ablate::summarize(&rows);
    let summary_name = format!("{name}_summary.csv");
    ablate::write_summary_csv(&out.join(&summary_name), &summary)?;
    let base_path = out.join(format!("{name}_base_config.txt"));
    fs::write(&base_path, base.to_string()).map_err(io_err(&base_path))?;
    if a.gnuplot {
        let mut metrics: Vec<String> = Vec::new();
        for s in &summary {
            if !metrics.contains(&s.metric) {
                metrics.push(s.metric.clone());
            }
        }
        let gp = out.join(format!("{name}.gp"));
        fs::write(&gp, ablate::gnuplot_script(a.kind, &summary_name, &metrics)).map_err(io_err(&gp))?;
    }
    println!("sweep_value,metric,mean,std,n");
    for s in &summary {
        println!("{},{},{:.4},{:.4},{}", s.sweep_value, s.metric, s.mean, s.std, s.n);
    }
    println!("{} rows written to {}", rows.len(), rows_path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
