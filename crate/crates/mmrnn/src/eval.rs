//! Held-out evaluation, lag-bucketed error breakdowns, decay-exponent
//! sweeps, baseline orchestration, and machine-readable report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{global_mean_order, impute_with_mean, preset, BaselineKind, ImputePolicy};
use crate::data::{
    split_holdout_last, Dataset, GroupSequence, HoldoutOrder, OrderStep, SplitReport,
};
use crate::decay::{DecaySpec, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::{forward_sequence, Mode, ModelConfig, ModelState};
use crate::numerics::{kahan_sum, Vector};
use crate::par;
use crate::training::{TrainConfig, TrainTrace};

/// Inclusive upper edge of the lag-bucket range, in days.
pub const MAX_BUCKET_DAYS: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub group_id: String,
    pub delta_t: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagBucket {
    pub delta_t: u32,
    #[serde(flatten)]
    pub stats: BucketStats,
}

/// Held-out error report. Buckets cover integer gaps 1..=30 days (plus 0,
/// defensively); only non-empty buckets are materialized, and anything that
/// falls outside the integer day range lands in `other` (unreachable for
/// corpora produced by the canonical loaders and split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_group: Vec<GroupEval>,
    pub overall_mean: f64,
    pub overall_std: f64,
    pub buckets: Vec<LagBucket>,
    pub other: Option<BucketStats>,
    /// True when errors are divided by the item count (topic mode).
    pub per_item_normalized: bool,
}

/// How to bridge the held-out gap when the model was trained on a daily
/// grid: insert `delta_t - 1` policy-filled steps before the real order.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutImputation {
    pub policy: ImputePolicy,
    /// Global mean order of the (unimputed) training corpus; required by the
    /// mean policy.
    pub mean: Option<Vector>,
}

fn population_stats(errors: &[f64]) -> (f64, f64) {
    let n = errors.len() as f64;
    let mean = kahan_sum(errors.iter().copied()) / n;
    let var = kahan_sum(errors.iter().map(|e| (e - mean) * (e - mean))) / n;
    (mean, var.max(0.0).sqrt())
}

/// Score each group's held-out order: run the model over the training
/// sequence, extend one step across the held-out gap, and measure the
/// squared error of the final prediction (normalized histograms in basic
/// mode; raw counts divided by V in topic mode). The model is never mutated.
pub fn evaluate_holdout(
    state: &ModelState,
    train_data: &Dataset,
    holdout: &[HoldoutOrder],
    gap_fill: Option<&HoldoutImputation>,
) -> Result<EvalReport> {
    state.validate()?;
    if holdout.is_empty() {
        return Err(Error::data("holdout set is empty".to_string()));
    }
    if holdout.len() != train_data.n_groups() || holdout.len() != state.group_bias.len() {
        return Err(Error::Dimension(format!(
            "{} holdout orders for {} training groups and {} biases",
            holdout.len(),
            train_data.n_groups(),
            state.group_bias.len()
        )));
    }
    for ((h, g), b) in holdout
        .iter()
        .zip(&train_data.groups)
        .zip(&state.group_bias)
    {
        if h.group_id != g.group_id || h.group_id != b.group_id {
            return Err(Error::State(format!(
                "holdout/train/model group mismatch: {} vs {} vs {}",
                h.group_id, g.group_id, b.group_id
            )));
        }
    }
    if let Some(fill) = gap_fill {
        if fill.policy == ImputePolicy::Mean {
            let mean = fill.mean.as_ref().ok_or_else(|| {
                Error::Config("mean gap fill requires the training mean".to_string())
            })?;
            if mean.len() != train_data.n_items() {
                return Err(Error::Dimension(format!(
                    "gap-fill mean has {} items, corpus has {}",
                    mean.len(),
                    train_data.n_items()
                )));
            }
        }
    }

    let v = state.config.n_items;
    let indices: Vec<usize> = (0..holdout.len()).collect();
    let scored: Vec<Result<f64>> = par::map_collect(&indices, |&i| {
        let held = &holdout[i];
        let base = &train_data.groups[i];
        let run = || -> Result<f64> {
            let mut steps = base.steps.clone();
            match gap_fill {
                None => steps.push(OrderStep {
                    delta_t: Some(held.delta_t),
                    counts: held.counts.clone(),
                }),
                Some(fill) => {
                    if held.delta_t < 1.0 {
                        return Err(Error::data(format!(
                            "{}-day held-out gap cannot be regridded",
                            held.delta_t
                        )));
                    }
                    let prev = steps
                        .last()
                        .map(|s| s.counts.clone())
                        .unwrap_or_else(|| Vector::zeros(v));
                    for _ in 0..held.delta_t as usize - 1 {
                        let counts = match fill.policy {
                            ImputePolicy::Mean => fill.mean.clone().unwrap(),
                            ImputePolicy::Forward => prev.clone(),
                            ImputePolicy::Zero => Vector::zeros(v),
                        };
                        steps.push(OrderStep {
                            delta_t: Some(1.0),
                            counts,
                        });
                    }
                    steps.push(OrderStep {
                        delta_t: Some(1.0),
                        counts: held.counts.clone(),
                    });
                }
            }
            let extended = GroupSequence {
                group_id: base.group_id.clone(),
                steps,
            };
            let preds = forward_sequence(
                &state.config,
                &state.theta,
                &state.group_bias[i],
                state.topics.as_ref(),
                &extended,
            )?;
            let last = preds.last().expect("extended sequence is non-empty");
            let err = match state.config.mode {
                Mode::Basic => {
                    let target = held.counts.l1_normalized();
                    let mut ss = 0.0;
                    for j in 0..v {
                        let r = last.yhat[j] - target[j];
                        ss += r * r;
                    }
                    ss
                }
                Mode::Topic => {
                    let mut ss = 0.0;
                    for j in 0..v {
                        let r = last.yhat[j] - held.counts[j];
                        ss += r * r;
                    }
                    ss / v as f64
                }
            };
            if !err.is_finite() {
                return Err(Error::Numerical(format!("non-finite error ({err})")));
            }
            Ok(err)
        };
        run().map_err(|e| e.with_context(&format!("group {}", held.group_id)))
    });

    let mut per_group = Vec::with_capacity(holdout.len());
    let mut all_errors = Vec::with_capacity(holdout.len());
    let mut bucketed: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut other_errors = Vec::new();
    for (held, scored) in holdout.iter().zip(scored) {
        let error = scored?;
        per_group.push(GroupEval {
            group_id: held.group_id.clone(),
            delta_t: held.delta_t,
            error,
        });
        all_errors.push(error);
        let day = held.delta_t;
        if day.fract() == 0.0 && day >= 0.0 && day <= f64::from(MAX_BUCKET_DAYS) {
            bucketed.entry(day as u32).or_default().push(error);
        } else {
            other_errors.push(error);
        }
    }
    let (overall_mean, overall_std) = population_stats(&all_errors);
    let buckets = bucketed
        .into_iter()
        .map(|(delta_t, errs)| {
            let (mean_error, std_error) = population_stats(&errs);
            LagBucket {
                delta_t,
                stats: BucketStats {
                    count: errs.len(),
                    mean_error,
                    std_error,
                },
            }
        })
        .collect();
    let other = if other_errors.is_empty() {
        None
    } else {
        let (mean_error, std_error) = population_stats(&other_errors);
        Some(BucketStats {
            count: other_errors.len(),
            mean_error,
            std_error,
        })
    };
    Ok(EvalReport {
        per_group,
        overall_mean,
        overall_std,
        buckets,
        other,
        per_item_normalized: state.config.mode == Mode::Topic,
    })
}

// ---------------------------------------------------------------------------
// Baseline orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub state: ModelState,
    pub trace: TrainTrace,
    pub report: EvalReport,
    pub split: SplitReport,
}

/// Split off each group's final order, train the requested system on the
/// rest, and score the held-out orders. Imputed baselines regrid the
/// training corpus first and bridge the held-out gap with the same policy.
pub fn run_experiment(
    corpus: &Dataset,
    baseline: BaselineKind,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    init_seed: u64,
) -> Result<ExperimentOutcome> {
    run_experiment_with_progress(corpus, baseline, base, tcfg, init_seed, |_, _| {})
}

/// Same as [`run_experiment`], invoking `on_epoch` after each training epoch.
pub fn run_experiment_with_progress(
    corpus: &Dataset,
    baseline: BaselineKind,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    init_seed: u64,
    on_epoch: impl FnMut(usize, &crate::training::EpochStat),
) -> Result<ExperimentOutcome> {
    let (train_split, holdout, split) = split_holdout_last(corpus);
    if train_split.n_groups() == 0 {
        return Err(Error::data(
            "no group has at least two orders; nothing to train on".to_string(),
        ));
    }
    let config = preset(baseline.preset_kind(), base);
    let (mut state, train_set, gap_fill) = match baseline.impute_policy() {
        None => (
            ModelState::init(&config, init_seed, &train_split)?,
            train_split,
            None,
        ),
        Some(policy) => {
            let mean = if policy == ImputePolicy::Mean {
                Some(global_mean_order(&train_split)?)
            } else {
                None
            };
            let imputed = impute_with_mean(&train_split, policy, mean.as_ref())?;
            (
                ModelState::init(&config, init_seed, &imputed)?,
                imputed,
                Some(HoldoutImputation { policy, mean }),
            )
        }
    };
    let trace = crate::training::train_with_progress(tcfg, &mut state, &train_set, on_epoch)?;
    let report = evaluate_holdout(&state, &train_set, &holdout, gap_fill.as_ref())?;
    Ok(ExperimentOutcome {
        state,
        trace,
        report,
        split,
    })
}

// ---------------------------------------------------------------------------
// Decay-exponent sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub t0_values: Vec<f64>,
    pub kappa_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub t0: f64,
    pub kappa: f64,
    pub seed: u64,
    /// Held-out mean error; absent when the cell diverged.
    pub mean_error: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub t0: f64,
    pub kappa: f64,
    /// Number of cells that finished.
    pub completed: usize,
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    /// One summary per (t0, kappa) with at least one completed cell.
    pub summaries: Vec<SweepSummary>,
}

/// Linear-interpolation quantile of a sorted slice (the numpy default).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&p));
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Train and score one model per (t0, kappa, seed) cell. Cells are
/// independent; a diverging cell records its failure without aborting the
/// rest. Deterministic given the grid and seeds.
pub fn kappa_sweep(
    corpus: &Dataset,
    grid: &SweepGrid,
    base: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<SweepResult> {
    if grid.t0_values.is_empty() || grid.kappa_values.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Config("sweep grid must be non-empty".to_string()));
    }
    let mut specs = Vec::new();
    for &t0 in &grid.t0_values {
        for &kappa in &grid.kappa_values {
            for &seed in &grid.seeds {
                specs.push((t0, kappa, seed));
            }
        }
    }
    let cells: Vec<SweepCell> = par::map_collect(&specs, |&(t0, kappa, seed)| {
        let run = || -> Result<f64> {
            let mut config = base.clone();
            config.schedule = ScheduleKind::PowerLaw(DecaySpec { t0, kappa });
            let cell_tcfg = TrainConfig {
                seed,
                ..tcfg.clone()
            };
            let outcome = run_experiment(corpus, BaselineKind::Mmrnn, &config, &cell_tcfg, seed)?;
            Ok(outcome.report.overall_mean)
        };
        match run() {
            Ok(mean_error) => SweepCell {
                t0,
                kappa,
                seed,
                mean_error: Some(mean_error),
                failure: None,
            },
            Err(e) => SweepCell {
                t0,
                kappa,
                seed,
                mean_error: None,
                failure: Some(e.to_string()),
            },
        }
    });

    let mut summaries = Vec::new();
    for &t0 in &grid.t0_values {
        for &kappa in &grid.kappa_values {
            let mut errs: Vec<f64> = cells
                .iter()
                .filter(|c| c.t0 == t0 && c.kappa == kappa)
                .filter_map(|c| c.mean_error)
                .collect();
            if errs.is_empty() {
                continue;
            }
            errs.sort_by(|a, b| a.total_cmp(b));
            summaries.push(SweepSummary {
                t0,
                kappa,
                completed: errs.len(),
                median: quantile(&errs, 0.5),
                lower_quartile: quantile(&errs, 0.25),
                upper_quartile: quantile(&errs, 0.75),
            });
        }
    }
    Ok(SweepResult { cells, summaries })
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!(
                "unknown report format {other:?}; expected json or csv"
            ))),
        }
    }
}

/// Format a float with 17 significant digits, enough to reproduce the exact
/// f64 on parse.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_json_value(value: &serde_json::Value, out: &mut String, indent: usize) {
    match value {
        serde_json::Value::Null => out.push_str("null"),
        serde_json::Value::Bool(b) => {
            let _ = write!(out, "{b}");
        }
        serde_json::Value::Number(n) => {
            if let Some(f) = n.as_f64().filter(|_| n.is_f64()) {
                let _ = write!(out, "{}", fmt_f64(f));
            } else {
                let _ = write!(out, "{n}");
            }
        }
        serde_json::Value::String(s) => {
            let _ = write!(out, "{}", serde_json::Value::String(s.clone()));
        }
        serde_json::Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&"  ".repeat(indent + 1));
                write_json_value(item, out, indent + 1);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&"  ".repeat(indent));
            out.push(']');
        }
        serde_json::Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (key, item)) in map.iter().enumerate() {
                out.push_str(&"  ".repeat(indent + 1));
                let _ = write!(out, "{}: ", serde_json::Value::String(key.clone()));
                write_json_value(item, out, indent + 1);
                if i + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            out.push_str(&"  ".repeat(indent));
            out.push('}');
        }
    }
}

/// Serialize any report-like value as JSON with stable (alphabetical) field
/// ordering and floats at 17 significant digits.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value)
        .map_err(|e| Error::State(format!("serialization failed: {e}")))?;
    let mut out = String::new();
    write_json_value(&value, &mut out, 0);
    out.push('\n');
    Ok(out)
}

pub const LAG_CSV_HEADER: &str = "delta_t,count,mean_error,std_error";
pub const SWEEP_CSV_HEADER: &str = "t0,kappa,seed,mean_error";

/// Lag-bucket table of an evaluation report.
pub fn eval_report_csv(report: &EvalReport) -> String {
    let mut out = String::from(LAG_CSV_HEADER);
    out.push('\n');
    for bucket in &report.buckets {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            bucket.delta_t,
            bucket.stats.count,
            fmt_f64(bucket.stats.mean_error),
            fmt_f64(bucket.stats.std_error)
        );
    }
    out
}

/// Per-cell table of a sweep; diverged cells leave mean_error empty.
pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for cell in &sweep.cells {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(cell.t0),
            fmt_f64(cell.kappa),
            cell.seed,
            cell.mean_error.map(fmt_f64).unwrap_or_default()
        );
    }
    out
}

pub fn emit_eval_report(
    report: &EvalReport,
    path: impl AsRef<Path>,
    format: ReportFormat,
) -> Result<()> {
    let text = match format {
        ReportFormat::Json => to_json_string(report)?,
        ReportFormat::Csv => eval_report_csv(report),
    };
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn emit_sweep(sweep: &SweepResult, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => to_json_string(sweep)?,
        ReportFormat::Csv => sweep_csv(sweep),
    };
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}
