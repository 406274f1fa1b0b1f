//! Ablation studies over trained models.
//!
//! Every study trains the models it needs through a [`Runner`], which caches
//! runs by their canonical configuration so a baseline shared by several
//! sweep points is trained once. Results are long-format rows
//! `sweep_value,seed,metric,value`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use super::{
    attenuate_eval, class_change_rate_gt, class_change_rate_model, evaluate, train, AttenuationMode,
    EngineError, Mode, SwapSpec, TrainConfig, TrainOptions, TrainOutcome,
};
use crate::data::Dataset;
use crate::taf::ChangeRateSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationKind {
    ChangeRate,
    Context,
    SwapCurve,
    Attenuate,
    ClassRate,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::ChangeRate,
        AblationKind::Context,
        AblationKind::SwapCurve,
        AblationKind::Attenuate,
        AblationKind::ClassRate,
    ];

    /// Studies that compare accuracies across seeds.
    pub fn min_seeds(self) -> usize {
        match self {
            AblationKind::ChangeRate | AblationKind::Context | AblationKind::SwapCurve => 3,
            AblationKind::Attenuate | AblationKind::ClassRate => 1,
        }
    }

    pub fn default_sweep(self) -> Vec<f64> {
        match self {
            AblationKind::ChangeRate => vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2, f64::INFINITY],
            AblationKind::Context => vec![1.0, 3.0, 7.0, 15.0, 30.0],
            AblationKind::SwapCurve | AblationKind::ClassRate => (-15..=15).map(f64::from).collect(),
            AblationKind::Attenuate => vec![],
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::ChangeRate => "change-rate",
            AblationKind::Context => "context",
            AblationKind::SwapCurve => "swap-curve",
            AblationKind::Attenuate => "attenuate",
            AblationKind::ClassRate => "class-rate",
        })
    }
}

impl FromStr for AblationKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| EngineError::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub sweep_value: f64,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl AblationRow {
    fn new(sweep_value: f64, seed: u64, metric: impl Into<String>, value: f64) -> Self {
        Self {
            sweep_value,
            seed,
            metric: metric.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

/// Mean and spread per (sweep value, metric), in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(u64, String)> = Vec::new();
    let mut groups: HashMap<(u64, String), Vec<f64>> = HashMap::new();
    for r in rows {
        let key = (r.sweep_value.to_bits(), r.metric.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.value);
    }
    order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                sweep_value: f64::from_bits(key.0),
                metric: key.1,
                mean,
                std,
                min: v.iter().cloned().fold(f64::INFINITY, f64::min),
                max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                n,
            }
        })
        .collect()
}

/// The summary row for `(sweep_value, metric)`.
pub fn lookup<'a>(summary: &'a [SummaryRow], sweep_value: f64, metric: &str) -> Option<&'a SummaryRow> {
    summary
        .iter()
        .find(|s| s.sweep_value.to_bits() == sweep_value.to_bits() && s.metric == metric)
}

pub fn write_rows_csv(path: &Path, rows: &[AblationRow]) -> Result<(), EngineError> {
    let mut s = String::from("sweep_value,seed,metric,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.sweep_value, r.seed, r.metric, r.value));
    }
    fs::write(path, s).map_err(EngineError::io(path))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<AblationRow>, EngineError> {
    let text = fs::read_to_string(path).map_err(EngineError::io(path))?;
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let bad = || EngineError::Config(format!("{}:{}: malformed row", path.display(), i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(AblationRow {
                sweep_value: f[0].parse().map_err(|_| bad())?,
                seed: f[1].parse().map_err(|_| bad())?,
                metric: f[2].to_string(),
                value: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<(), EngineError> {
    let mut s = String::from("sweep_value,metric,mean,std,min,max,n\n");
    for r in summary {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sweep_value, r.metric, r.mean, r.std, r.min, r.max, r.n
        ));
    }
    fs::write(path, s).map_err(EngineError::io(path))
}

/// A gnuplot script drawing mean ± std of every metric in `summary_csv`.
pub fn gnuplot_script(kind: AblationKind, summary_csv: &str, metrics: &[String]) -> String {
    let xlabel = match kind {
        AblationKind::ChangeRate => "c1",
        AblationKind::Context => "n_h",
        AblationKind::SwapCurve | AblationKind::ClassRate => "offset",
        AblationKind::Attenuate => "class",
    };
    let mut s = format!(
        "set datafile separator ','\nset key outside\nset xlabel '{xlabel}'\nset title '{kind}'\nset terminal pngcairo size 900,600\nset output '{kind}.png'\n"
    );
    if kind == AblationKind::ChangeRate {
        s.push_str("# c1 = 0 and c1 = inf are not shown on a log axis\nset logscale x\n");
    }
    let plots: Vec<String> = metrics
        .iter()
        .map(|m| {
            format!(
                "'{summary_csv}' using ($2 eq '{m}' ? $1 : 1/0):3:4 with yerrorlines title '{m}'"
            )
        })
        .collect();
    s.push_str(&format!("plot {}\n", plots.join(", \\\n     ")));
    s
}

/// Trains and caches the runs behind the studies.
pub struct Runner<'a> {
    pub base: TrainConfig,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    /// Concurrent trainings.
    pub jobs: usize,
    /// Where each run's config, log and checkpoints are archived.
    pub archive: Option<PathBuf>,
    cache: Mutex<HashMap<String, Arc<TrainOutcome>>>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<'a> Runner<'a> {
    pub fn new(base: TrainConfig, train: &'a Dataset, val: &'a Dataset) -> Self {
        Self {
            base,
            train,
            val,
            jobs: 1,
            archive: None,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn with_archive(mut self, dir: impl Into<PathBuf>) -> Self {
        self.archive = Some(dir.into());
        self
    }

    /// Directory name of the archived run for `cfg`.
    pub fn run_name(cfg: &TrainConfig) -> String {
        format!("run_{:016x}", fnv1a(&cfg.canonical().to_string()))
    }

    pub fn cached_runs(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn run_one(&self, cfg: &TrainConfig) -> Result<Arc<TrainOutcome>, EngineError> {
        let key = cfg.canonical().to_string();
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let dir = self.archive.as_ref().map(|a| a.join(Self::run_name(cfg)));
        log::info!(
            "training {} (mode {}, seed {}, c1 {}, n_h {})",
            Self::run_name(cfg),
            cfg.mode,
            cfg.seed,
            cfg.taf.schedule.rate(0),
            cfg.taf.n_h
        );
        let out = train(
            cfg,
            self.train,
            &TrainOptions {
                val: Some(self.val),
                out_dir: dir.as_deref(),
                jobs: 1,
            },
        )?;
        let out = Arc::new(out);
        self.cache.lock().expect("cache lock").insert(key, out.clone());
        Ok(out)
    }

    /// Trains every config not yet cached, up to `jobs` at a time, and
    /// returns the outcomes in input order.
    pub fn run_all(&self, cfgs: &[TrainConfig]) -> Result<Vec<Arc<TrainOutcome>>, EngineError> {
        let mut todo: Vec<&TrainConfig> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for c in cfgs {
                let key = c.canonical().to_string();
                if !cache.contains_key(&key) && !todo.iter().any(|t| t.canonical().to_string() == key) {
                    todo.push(c);
                }
            }
        }
        if self.jobs > 1 && todo.len() > 1 {
            let chunk = todo.len().div_ceil(self.jobs);
            std::thread::scope(|s| {
                let handles: Vec<_> = todo
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().try_for_each(|c| self.run_one(c).map(|_| ()))))
                    .collect();
                handles
                    .into_iter()
                    .try_for_each(|h| h.join().expect("training thread panicked"))
            })?;
        }
        cfgs.iter().map(|c| self.run_one(c)).collect()
    }

    fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.base.clone() }
    }

    fn baseline(&self, seed: u64) -> TrainConfig {
        let mut c = self.with_seed(seed);
        c.mode = Mode::Baseline;
        c.taf.lambda = 0.0;
        c
    }
}

fn check_seeds(kind: AblationKind, seeds: &[u64]) -> Result<(), EngineError> {
    if seeds.len() < kind.min_seeds() {
        return Err(EngineError::InsufficientSeeds {
            needed: kind.min_seeds(),
            got: seeds.len(),
        });
    }
    Ok(())
}

fn check_sweep(kind: AblationKind, sweep: &[f64]) -> Result<(), EngineError> {
    if sweep.is_empty() {
        return Err(EngineError::Config(format!("{kind}: empty sweep")));
    }
    Ok(())
}

fn as_offset(v: f64) -> Result<i64, EngineError> {
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(EngineError::Config(format!("offset {v} is not an integer")));
    }
    Ok(v as i64)
}

fn sort_rows(rows: &mut [AblationRow]) {
    rows.sort_by(|a, b| a.sweep_value.total_cmp(&b.sweep_value).then(a.seed.cmp(&b.seed)));
}

/// Val mIOU against the coarsest branch's change rate. The λ = 0 baseline is
/// reported as metric `baseline_val_miou` at every sweep value.
pub fn change_rate(runner: &Runner<'_>, sweep: &[f64], seeds: &[u64]) -> Result<Vec<AblationRow>, EngineError> {
    let kind = AblationKind::ChangeRate;
    check_seeds(kind, seeds)?;
    check_sweep(kind, sweep)?;
    let k = runner.base.arch.num_branches();
    let mut cfgs = Vec::new();
    for &seed in seeds {
        cfgs.push(runner.baseline(seed));
        for &c1 in sweep {
            let mut c = runner.with_seed(seed);
            c.mode = Mode::Taf;
            c.taf.schedule = ChangeRateSchedule::coarsest_only(c1, k)?;
            cfgs.push(c);
        }
    }
    let runs = runner.run_all(&cfgs)?;
    let mut rows = Vec::new();
    let per_seed = sweep.len() + 1;
    for (si, &seed) in seeds.iter().enumerate() {
        let base = &runs[si * per_seed];
        let base_m = evaluate(base.selected(), runner.val, None)?;
        for (j, &c1) in sweep.iter().enumerate() {
            let m = evaluate(runs[si * per_seed + 1 + j].selected(), runner.val, None)?;
            rows.push(AblationRow::new(c1, seed, "val_miou", m.miou));
            rows.push(AblationRow::new(c1, seed, "val_pixel_acc", m.pixel_acc));
            rows.push(AblationRow::new(c1, seed, "baseline_val_miou", base_m.miou));
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Val mIOU against the temporal context n_h.
pub fn context(runner: &Runner<'_>, sweep: &[f64], seeds: &[u64]) -> Result<Vec<AblationRow>, EngineError> {
    let kind = AblationKind::Context;
    check_seeds(kind, seeds)?;
    check_sweep(kind, sweep)?;
    let mut cfgs = Vec::new();
    for &seed in seeds {
        for &nh in sweep {
            if nh < 1.0 || nh.fract() != 0.0 {
                return Err(EngineError::Config(format!("n_h {nh} is not a positive integer")));
            }
            let mut c = runner.with_seed(seed);
            c.mode = Mode::Taf;
            c.taf.n_h = nh as usize;
            cfgs.push(c);
        }
    }
    let runs = runner.run_all(&cfgs)?;
    let mut rows = Vec::new();
    for (r, c) in runs.iter().zip(&cfgs) {
        let m = evaluate(r.selected(), runner.val, None)?;
        rows.push(AblationRow::new(c.taf.n_h as f64, c.seed, "val_miou", m.miou));
        rows.push(AblationRow::new(c.taf.n_h as f64, c.seed, "val_pixel_acc", m.pixel_acc));
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// mIOU of TAF and baseline models with `branch` taken from frame key + Δ,
/// on both the training and the validation split.
pub fn swap_curve(
    runner: &Runner<'_>,
    sweep: &[f64],
    seeds: &[u64],
    branch: usize,
) -> Result<Vec<AblationRow>, EngineError> {
    let kind = AblationKind::SwapCurve;
    check_seeds(kind, seeds)?;
    check_sweep(kind, sweep)?;
    let offsets: Vec<i64> = sweep.iter().map(|&v| as_offset(v)).collect::<Result<_, _>>()?;
    let mut cfgs = Vec::new();
    for &seed in seeds {
        let mut t = runner.with_seed(seed);
        t.mode = Mode::Taf;
        cfgs.push(t);
        cfgs.push(runner.baseline(seed));
    }
    let runs = runner.run_all(&cfgs)?;
    let mut rows = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for (name, run) in [("taf", &runs[2 * si]), ("baseline", &runs[2 * si + 1])] {
            for (split, ds) in [("train", runner.train), ("val", runner.val)] {
                for &d in &offsets {
                    let m = evaluate(run.selected(), ds, Some(SwapSpec { branch, offset: d }))?;
                    rows.push(AblationRow::new(d as f64, seed, format!("{name}_{split}_miou"), m.miou));
                }
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Per-class IOU change of TAF models when `branch` is attenuated; the sweep
/// value is the class index.
pub fn attenuate(
    runner: &Runner<'_>,
    seeds: &[u64],
    branch: usize,
    mode: AttenuationMode,
) -> Result<Vec<AblationRow>, EngineError> {
    check_seeds(AblationKind::Attenuate, seeds)?;
    let cfgs: Vec<TrainConfig> = seeds
        .iter()
        .map(|&s| TrainConfig {
            mode: Mode::Taf,
            ..runner.with_seed(s)
        })
        .collect();
    let runs = runner.run_all(&cfgs)?;
    let mut rows = Vec::new();
    for (run, &seed) in runs.iter().zip(seeds) {
        let a = attenuate_eval(run.selected(), runner.val, branch, mode)?;
        for (c, d) in a.deltas.iter().enumerate() {
            let c = c as f64;
            if let Some(d) = d {
                rows.push(AblationRow::new(c, seed, "delta_iou", *d));
            }
            if let Some(v) = a.normal.per_class_iou[c as usize] {
                rows.push(AblationRow::new(c, seed, "normal_iou", v));
            }
            if let Some(v) = a.attenuated.per_class_iou[c as usize] {
                rows.push(AblationRow::new(c, seed, "attenuated_iou", v));
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Normalized per-class IOU against Δ, from rendered ground truth (seed 0)
/// and from TAF model predictions (one set of rows per seed).
pub fn class_rate(runner: &Runner<'_>, sweep: &[f64], seeds: &[u64], with_models: bool) -> Result<Vec<AblationRow>, EngineError> {
    let kind = AblationKind::ClassRate;
    check_sweep(kind, sweep)?;
    let offsets: Vec<i64> = sweep.iter().map(|&v| as_offset(v)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let k = runner.base.classes;
    let gt = class_change_rate_gt(runner.val, k, &offsets)?;
    push_rates(&mut rows, &gt.offsets, &gt.ratios, 0, "gt");
    if with_models {
        check_seeds(kind, seeds)?;
        let cfgs: Vec<TrainConfig> = seeds
            .iter()
            .map(|&s| TrainConfig {
                mode: Mode::Taf,
                ..runner.with_seed(s)
            })
            .collect();
        for (run, &seed) in runner.run_all(&cfgs)?.iter().zip(seeds) {
            let r = class_change_rate_model(run.selected(), runner.val, &offsets)?;
            push_rates(&mut rows, &r.offsets, &r.ratios, seed, "model");
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

fn push_rates(rows: &mut Vec<AblationRow>, offsets: &[i64], ratios: &[Vec<Option<f64>>], seed: u64, source: &str) {
    for (d, per_class) in offsets.iter().zip(ratios) {
        for (c, v) in per_class.iter().enumerate() {
            if let Some(v) = v {
                rows.push(AblationRow::new(*d as f64, seed, format!("{source}_class{c}"), *v));
            }
        }
    }
}
