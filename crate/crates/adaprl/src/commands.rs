//! The `train`, `sweep` and `predict` commands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adaprl_core::metrics::MetricReport;
use adaprl_core::train::LogRecord;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::csvio;
use crate::error::AppError;
use crate::run::{prepare, train_point, Point, Source};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";
pub const DETAIL_FILE: &str = "detail.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub repeats: Option<usize>,
    pub jobs: Option<usize>,
}

fn resolve(path: &Path, opts: &Options) -> Result<(RunConfig, PathBuf, String), AppError> {
    let (mut cfg, bytes) = RunConfig::load(path)?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(r) = opts.repeats {
        if r == 0 {
            return Err(AppError::Config("`--repeats` must be at least 1".into()));
        }
        cfg.repeats = r;
    }
    let out = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let mut h = Sha256::new();
    h.update(&bytes);
    h.update(cfg.seed.to_le_bytes());
    let stamp: String = h.finalize()[..6].iter().map(|b| format!("{b:02x}")).collect();
    Ok((cfg, out, stamp))
}

fn create_dir(dir: &Path) -> Result<(), AppError> {
    fs::create_dir_all(dir).map_err(AppError::io(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AppError> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    fs::write(path, text).map_err(AppError::io(path))
}

/// Writes the log as JSON lines.
pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<(), AppError> {
    let file = File::create(path).map_err(AppError::io(path))?;
    let mut w = BufWriter::new(file);
    for rec in log {
        serde_json::to_writer(&mut w, rec).expect("log records serialize");
        w.write_all(b"\n").map_err(AppError::io(path))?;
    }
    w.flush().map_err(AppError::io(path))
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub epochs_completed: usize,
    pub best_epoch: usize,
    pub valid: MetricReport,
    pub test: MetricReport,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
}

/// Trains once and writes the checkpoint, log and metrics under
/// `<out>/<name>-<stamp>`.
pub fn cmd_train(config: &Path, opts: &Options) -> Result<TrainSummary, AppError> {
    let (cfg, out, stamp) = resolve(config, opts)?;
    let source = Source::open(&cfg)?;
    let ds = source.dataset(cfg.seed)?;
    let point = Point::from_config(&cfg);
    let data = prepare(&cfg, &ds, &point, cfg.seed)?;
    let outcome = train_point(&cfg, &data, &point, cfg.seed)?;

    let dir = out.join(format!("{}-{stamp}", cfg.name));
    create_dir(&dir)?;
    let ck = Checkpoint {
        model: outcome.state.model.clone(),
        binners: data.binners.clone(),
    };
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &ck)?;
    write_log(&dir.join(LOG_FILE), &outcome.state.log)?;
    let metrics = RunMetrics {
        seed: cfg.seed,
        epochs_completed: outcome.state.epochs_completed,
        best_epoch: outcome.state.best_epoch,
        valid: outcome.valid.report,
        test: outcome.test.report,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    Ok(TrainSummary { dir, metrics })
}

pub const ADAPRL_ARM: &str = "adaprl";
pub const BASELINE_ARM: &str = "baseline";

/// One (grid point, seed, arm) row of the detail table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub sweep: String,
    pub value: f64,
    pub arm: String,
    pub seed: u64,
    pub status: String,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub test_kendall_tau: Option<f64>,
    pub test_spearman_sigma_error: Option<f64>,
    pub valid_mse: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    /// `(baseline - arm) / baseline` test MSE under the same seed.
    pub improvement_mse: Option<f64>,
}

impl DetailRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Per-point means of the detail rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub sweep: String,
    pub value: f64,
    pub adaprl_runs: usize,
    pub baseline_runs: usize,
    pub adaprl_test_mse: Option<f64>,
    pub baseline_test_mse: Option<f64>,
    pub adaprl_test_mae: Option<f64>,
    pub baseline_test_mae: Option<f64>,
    pub adaprl_test_kendall_tau: Option<f64>,
    pub baseline_test_kendall_tau: Option<f64>,
    pub adaprl_spearman_sigma_error: Option<f64>,
    /// Mean of the AdaPRL rows' paired improvements.
    pub mean_improvement_mse: Option<f64>,
    /// `(baseline mean - adaprl mean) / baseline mean`.
    pub relative_improvement_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub detail: Vec<DetailRow>,
    pub aggregate: Vec<AggregateRow>,
    /// Exit code of the first failed run, if any.
    pub failure: Option<i32>,
}

fn improvement(base: f64, arm: f64) -> f64 {
    if base == arm {
        0.0
    } else {
        (base - arm) / base
    }
}

fn run_pair(
    cfg: &RunConfig,
    source: &Source,
    sweep: &str,
    value: f64,
    point: Point,
    seed: u64,
) -> (Vec<DetailRow>, Option<i32>) {
    let blank = |arm: &str| DetailRow {
        sweep: sweep.into(),
        value,
        arm: arm.into(),
        seed,
        status: "ok".into(),
        test_mse: None,
        test_mae: None,
        test_kendall_tau: None,
        test_spearman_sigma_error: None,
        valid_mse: None,
        best_epoch: None,
        epochs: None,
        improvement_mse: None,
    };
    let data = source.dataset(seed).and_then(|ds| prepare(cfg, &ds, &point, seed));
    let mut failure = None;
    let mut rows: Vec<DetailRow> = [(ADAPRL_ARM, point), (BASELINE_ARM, point.baseline())]
        .into_iter()
        .map(|(arm, p)| {
            let mut row = blank(arm);
            match data.as_ref().map_err(|e| e.to_string()).and_then(|d| {
                train_point(cfg, d, &p, seed).map_err(|e| {
                    failure.get_or_insert(e.exit_code());
                    e.to_string()
                })
            }) {
                Ok(o) => {
                    row.test_mse = Some(o.test.report.mse);
                    row.test_mae = Some(o.test.report.mae);
                    row.test_kendall_tau = Some(o.test.report.kendall_tau);
                    row.test_spearman_sigma_error = o.test.report.spearman_sigma_error;
                    row.valid_mse = Some(o.valid.report.mse);
                    row.best_epoch = Some(o.state.best_epoch);
                    row.epochs = Some(o.state.epochs_completed);
                }
                Err(msg) => row.status = format!("error: {msg}"),
            }
            row
        })
        .collect();
    if let Err(e) = &data {
        failure.get_or_insert(e.exit_code());
    }
    if let Some(base) = rows[1].test_mse {
        for r in rows.iter_mut() {
            r.improvement_mse = r.test_mse.map(|m| improvement(base, m));
        }
    }
    (rows, failure)
}

fn mean<'a>(rows: impl Iterator<Item = &'a DetailRow>, f: impl Fn(&DetailRow) -> Option<f64>) -> (usize, Option<f64>) {
    let v: Vec<f64> = rows.filter_map(f).collect();
    let m = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (v.len(), m)
}

/// Per-point means over the successful rows of each arm.
pub fn aggregate(detail: &[DetailRow]) -> Vec<AggregateRow> {
    let mut points: Vec<(String, f64)> = Vec::new();
    for r in detail {
        if !points
            .iter()
            .any(|(s, v)| s == &r.sweep && v.to_bits() == r.value.to_bits())
        {
            points.push((r.sweep.clone(), r.value));
        }
    }
    points
        .into_iter()
        .map(|(sweep, value)| {
            let arm = |name: &'static str| {
                let sweep = sweep.clone();
                detail.iter().filter(move |r| {
                    r.sweep == sweep && r.value.to_bits() == value.to_bits() && r.arm == name && r.ok()
                })
            };
            let (adaprl_runs, adaprl_test_mse) = mean(arm(ADAPRL_ARM), |r| r.test_mse);
            let (baseline_runs, baseline_test_mse) = mean(arm(BASELINE_ARM), |r| r.test_mse);
            let relative_improvement_mse = match (baseline_test_mse, adaprl_test_mse) {
                (Some(b), Some(a)) => Some(improvement(b, a)),
                _ => None,
            };
            AggregateRow {
                adaprl_runs,
                baseline_runs,
                adaprl_test_mse,
                baseline_test_mse,
                adaprl_test_mae: mean(arm(ADAPRL_ARM), |r| r.test_mae).1,
                baseline_test_mae: mean(arm(BASELINE_ARM), |r| r.test_mae).1,
                adaprl_test_kendall_tau: mean(arm(ADAPRL_ARM), |r| r.test_kendall_tau).1,
                baseline_test_kendall_tau: mean(arm(BASELINE_ARM), |r| r.test_kendall_tau).1,
                adaprl_spearman_sigma_error: mean(arm(ADAPRL_ARM), |r| r.test_spearman_sigma_error).1,
                mean_improvement_mse: mean(arm(ADAPRL_ARM), |r| r.improvement_mse).1,
                relative_improvement_mse,
                sweep,
                value,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), AppError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(AppError::io(path))
}

#[derive(Serialize, Deserialize)]
struct PointFile {
    rows: Vec<DetailRow>,
    failure: Option<i32>,
}

/// Runs every grid point for every repeat seed, each paired with an `alpha =
/// 0` baseline, and writes the detail and aggregate tables under
/// `<out>/<name>-sweep-<stamp>`.
///
/// Repeat `r` uses seed `seed + r`. Failed runs are recorded in the tables and
/// reported through [`SweepOutcome::failure`].
pub fn cmd_sweep(config: &Path, opts: &Options) -> Result<SweepOutcome, AppError> {
    let (cfg, out, stamp) = resolve(config, opts)?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| AppError::Config("`sweep` is required for the sweep command".into()))?;
    let source = Source::open(&cfg)?;
    let dir = out.join(format!("{}-sweep-{stamp}", cfg.name));
    let point_dir = dir.join("points");
    create_dir(&point_dir)?;

    let base = Point::from_config(&cfg);
    let jobs: Vec<(usize, f64, u64)> = sweep
        .values()
        .into_iter()
        .enumerate()
        .flat_map(|(i, v)| (0..cfg.repeats as u64).map(move |r| (i, v, r)))
        .map(|(i, v, r)| (i, v, cfg.seed.wrapping_add(r)))
        .collect();
    let file_for = |i: usize, seed: u64| point_dir.join(format!("{}-{i}-seed{seed}.json", sweep.name()));
    let work = |&(i, v, seed): &(usize, f64, u64)| -> Result<(), AppError> {
        let (rows, failure) = run_pair(&cfg, &source, sweep.name(), v, base.at(&sweep, v), seed);
        write_json(&file_for(i, seed), &PointFile { rows, failure })
    };
    let threads = opts.jobs.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| AppError::Config(format!("`--jobs`: {e}")))?;
    pool.install(|| jobs.par_iter().try_for_each(work))?;

    let mut detail = Vec::new();
    let mut failure = None;
    for &(i, _, seed) in &jobs {
        let path = file_for(i, seed);
        let text = fs::read_to_string(&path).map_err(AppError::io(&path))?;
        let pf: PointFile =
            serde_json::from_str(&text).map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
        failure = failure.or(pf.failure);
        detail.extend(pf.rows);
    }
    let aggregate = aggregate(&detail);
    write_csv(&dir.join(DETAIL_FILE), &detail)?;
    write_csv(&dir.join(AGGREGATE_FILE), &aggregate)?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    Ok(SweepOutcome {
        dir,
        detail,
        aggregate,
        failure,
    })
}

/// Writes predictions with one-sigma bands; returns the row count.
pub fn cmd_predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<usize, AppError> {
    let ck = checkpoint::load(checkpoint)?;
    let file = File::open(input).map_err(|e| AppError::Data(format!("cannot open {}: {e}", input.display())))?;
    let ds = csvio::read_features(file, &ck.model.config, &ck.binners).map_err(|e| match e {
        AppError::Data(m) => AppError::Data(format!("{}: {m}", input.display())),
        other => other,
    })?;
    let pred = ck.model.predict(&ds.full_batch())?;
    let out = File::create(output).map_err(AppError::io(output))?;
    csvio::write_predictions(BufWriter::new(out), &ck.model.config.targets, &pred)
        .map_err(|e| AppError::Data(format!("{}: {e}", output.display())))?;
    Ok(ds.rows())
}
