//! Command-line harness: generate synthetic corpora, train and score the
//! sequence model and its baselines, sweep decay parameters, and
//! materialize regridded corpora.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 numerical divergence.

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mmrnn::baselines::{global_mean_order, impute, impute_with_mean, BaselineKind, ImputePolicy};
use mmrnn::data::{
    aggregate_rare_items, generate_synthetic, load_aisle_map, load_orders_csv, split_holdout_last,
    write_ground_truth, write_orders_csv, Dataset, SyntheticSpec,
};
use mmrnn::decay::{DecaySpec, ScheduleKind};
use mmrnn::error::{Error, Result};
use mmrnn::eval::{
    emit_eval_report, emit_sweep, evaluate_holdout, kappa_sweep, run_experiment_with_progress,
    to_json_string, EvalReport, HoldoutImputation, LagBucket, ReportFormat, SweepGrid,
};
use mmrnn::model::{ModelConfig, ModelState};
use mmrnn::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Basic,
    Topic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

fn parse_baseline(s: &str) -> std::result::Result<BaselineKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "mmrnn",
    version,
    about = "Continuous-time, group-aware sequence model over ordered count data"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// Prediction head: item histograms directly, or mixtures over topics
    #[arg(long, global = true, value_enum, default_value_t = ModeArg::Topic)]
    mode: ModeArg,

    /// Decay offset t0 of the recency weight (t0 + dt)^-kappa
    #[arg(long, global = true, default_value_t = 1.0)]
    t0: f64,

    /// Decay exponent kappa of the recency weight
    #[arg(long, global = true, default_value_t = 0.3)]
    kappa: f64,

    /// LSTM hidden width
    #[arg(long, global = true, default_value_t = 10)]
    hidden_dim: usize,

    /// Topic count (topic mode only)
    #[arg(long, global = true, default_value_t = 25)]
    topics: usize,

    /// SGD learning rate
    #[arg(long, global = true, default_value_t = 0.01)]
    lr: f64,

    /// Training epochs
    #[arg(long, global = true, default_value_t = 20)]
    epochs: usize,

    /// RNG seed (parameter init and epoch shuffling)
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// System to run: mmrnn | lstm | exchangeable | impute-mean |
    /// impute-forward | impute-zero
    #[arg(long, global = true, value_parser = parse_baseline, default_value = "mmrnn")]
    baseline: BaselineKind,

    /// Output path (stdout for reports when omitted)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// item_id,aisle_id CSV used when folding rare items into their aisles
    #[arg(long, global = true)]
    aisles: Option<PathBuf>,

    /// Fold items whose corpus-wide count is below this into per-aisle
    /// buckets (requires --aisles; 0 disables)
    #[arg(long, global = true, default_value_t = 0.0)]
    rare_threshold: f64,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic corpus with known structure
    Generate {
        /// Number of groups (independent sequences)
        #[arg(long, default_value_t = 50)]
        groups: usize,
        /// Item vocabulary size
        #[arg(long, default_value_t = 30)]
        items: usize,
        /// Minimum orders per group
        #[arg(long, default_value_t = 15)]
        orders_min: usize,
        /// Maximum orders per group
        #[arg(long, default_value_t = 25)]
        orders_max: usize,
        /// Also write the generating parameters (mixtures, biases) here
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Train on a corpus, score the held-out final orders, emit a run report
    Train {
        /// Orders CSV
        data: PathBuf,
        /// Persist the trained model as JSON for later `evaluate`
        #[arg(long)]
        model: Option<PathBuf>,
        /// Shuffle group visit order each epoch
        #[arg(long, default_value_t = false)]
        shuffle: bool,
        /// Groups per parameter update (defaults to full batch)
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Re-score a saved model against a corpus's held-out final orders
    Evaluate {
        /// Orders CSV (the same corpus the model was trained from)
        data: PathBuf,
        /// Model JSON written by `train --model`
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
    /// Train and score one model per (t0, kappa, seed) grid cell
    Sweep {
        /// Orders CSV
        data: PathBuf,
        /// Comma-separated t0 values
        #[arg(long, value_delimiter = ',', default_value = "1")]
        t0_grid: Vec<f64>,
        /// Comma-separated kappa values
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.3,1,3")]
        kappa_grid: Vec<f64>,
        /// Number of seeds per cell (0..n)
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = FormatArg::Json)]
        format: FormatArg,
    },
    /// Materialize a daily-regridded corpus under an imputation policy
    Impute {
        /// Orders CSV
        data: PathBuf,
    },
}

/// Saved-model envelope: enough to re-run evaluation against the corpus.
#[derive(Serialize, Deserialize)]
struct SavedModel {
    baseline: String,
    item_ids: Vec<String>,
    state: ModelState,
}

/// Structure of the run report written by `train`.
#[derive(Serialize)]
struct RunOutput {
    config: RunConfigEcho,
    /// Objective value after each epoch.
    train_trace: Vec<f64>,
    eval: EvalSummary,
    seed: u64,
    wall_time_seconds: f64,
}

#[derive(Serialize)]
struct RunConfigEcho {
    baseline: String,
    data: String,
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct EvalSummary {
    overall_mean: f64,
    overall_std: f64,
    buckets: Vec<LagBucket>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::State(_) => 1,
        Error::Data { .. } | Error::Io { .. } => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code for usage errors is 2, which collides
            // with our "data error"; remap usage errors to 1
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn base_config(cli: &Cli, n_items: usize) -> ModelConfig {
    let schedule = ScheduleKind::PowerLaw(DecaySpec {
        t0: cli.t0,
        kappa: cli.kappa,
    });
    match cli.mode {
        ModeArg::Basic => ModelConfig::basic(n_items, cli.hidden_dim, schedule),
        ModeArg::Topic => ModelConfig::topic(n_items, cli.topics, cli.hidden_dim, schedule),
    }
}

fn train_config(cli: &Cli, shuffle: bool, batch_size: Option<usize>) -> TrainConfig {
    TrainConfig {
        lr: cli.lr,
        epochs: cli.epochs,
        seed: cli.seed,
        shuffle,
        batch_size,
        ..TrainConfig::default()
    }
}

fn require_out(cli: &Cli, what: &str) -> Result<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config(format!("{what} requires --out")))
}

fn load_corpus(cli: &Cli, path: &PathBuf) -> Result<Dataset> {
    let corpus = load_orders_csv(path)?;
    if cli.rare_threshold > 0.0 {
        let aisles_path = cli
            .aisles
            .as_ref()
            .ok_or_else(|| Error::Config("--rare-threshold requires --aisles".to_string()))?;
        let map = load_aisle_map(aisles_path)?;
        let folded = aggregate_rare_items(&corpus, cli.rare_threshold, &map)?;
        eprintln!(
            "folded rare items below {}: {} -> {} items",
            cli.rare_threshold,
            corpus.n_items(),
            folded.n_items()
        );
        return Ok(folded);
    }
    Ok(corpus)
}

fn write_or_print(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_epoch(epoch: usize, total: usize, stat: &mmrnn::training::EpochStat) {
    eprintln!(
        "epoch {:>3}/{}: objective {:.6} ({:.2}s)",
        epoch + 1,
        total,
        stat.objective,
        stat.seconds
    );
}

fn run(cli: Cli) -> Result<()> {
    match &cli.verb {
        Verb::Generate {
            groups,
            items,
            orders_min,
            orders_max,
            truth,
        } => {
            let out = require_out(&cli, "generate")?;
            let spec = SyntheticSpec {
                groups: *groups,
                items: *items,
                orders_min: *orders_min,
                orders_max: *orders_max,
                topics: cli.topics,
                hidden_dim: cli.hidden_dim,
                decay: ScheduleKind::PowerLaw(DecaySpec {
                    t0: cli.t0,
                    kappa: cli.kappa,
                }),
                seed: cli.seed,
                ..SyntheticSpec::default()
            };
            let (ds, gt) = generate_synthetic(&spec)?;
            write_orders_csv(&ds, &out)?;
            eprintln!(
                "wrote {} groups / {} orders / {} items to {}",
                ds.n_groups(),
                ds.total_orders(),
                ds.n_items(),
                out.display()
            );
            if let Some(truth_path) = truth {
                write_ground_truth(&gt, truth_path)?;
                eprintln!("wrote generating parameters to {}", truth_path.display());
            }
            Ok(())
        }
        Verb::Train {
            data,
            model,
            shuffle,
            batch_size,
        } => {
            let corpus = load_corpus(&cli, data)?;
            let base = base_config(&cli, corpus.n_items());
            let tcfg = train_config(&cli, *shuffle, *batch_size);
            let epochs = tcfg.epochs;
            let started = std::time::Instant::now();
            let outcome = run_experiment_with_progress(
                &corpus,
                cli.baseline,
                &base,
                &tcfg,
                cli.seed,
                |epoch, stat| print_epoch(epoch, epochs, stat),
            )?;
            let wall = started.elapsed().as_secs_f64();
            eprintln!(
                "held-out mean error {:.6} over {} groups",
                outcome.report.overall_mean,
                outcome.report.per_group.len()
            );
            if let Some(model_path) = model {
                let saved = SavedModel {
                    baseline: cli.baseline.to_string(),
                    item_ids: corpus.vocab.ids().to_vec(),
                    state: outcome.state.clone(),
                };
                write_or_print(&to_json_string(&saved)?, Some(model_path))?;
                eprintln!("wrote model to {}", model_path.display());
            }
            let output = RunOutput {
                config: RunConfigEcho {
                    baseline: cli.baseline.to_string(),
                    data: data.display().to_string(),
                    model: outcome.state.config.clone(),
                    train: tcfg,
                },
                train_trace: outcome.trace.epochs.iter().map(|e| e.objective).collect(),
                eval: EvalSummary {
                    overall_mean: outcome.report.overall_mean,
                    overall_std: outcome.report.overall_std,
                    buckets: outcome.report.buckets.clone(),
                },
                seed: cli.seed,
                wall_time_seconds: wall,
            };
            write_or_print(&to_json_string(&output)?, cli.out.as_ref())
        }
        Verb::Evaluate {
            data,
            model,
            format,
        } => {
            let corpus = load_corpus(&cli, data)?;
            let report = evaluate_saved(&corpus, model)?;
            match cli.out.as_ref() {
                Some(path) => emit_eval_report(&report, path, (*format).into()),
                None => {
                    let text = match format {
                        FormatArg::Json => to_json_string(&report)?,
                        FormatArg::Csv => mmrnn::eval::eval_report_csv(&report),
                    };
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Verb::Sweep {
            data,
            t0_grid,
            kappa_grid,
            seeds,
            format,
        } => {
            let corpus = load_corpus(&cli, data)?;
            let base = base_config(&cli, corpus.n_items());
            let tcfg = train_config(&cli, false, None);
            let grid = SweepGrid {
                t0_values: t0_grid.clone(),
                kappa_values: kappa_grid.clone(),
                seeds: (0..*seeds).collect(),
            };
            eprintln!(
                "sweeping {} cells ({} t0 x {} kappa x {} seeds)",
                grid.t0_values.len() * grid.kappa_values.len() * grid.seeds.len(),
                grid.t0_values.len(),
                grid.kappa_values.len(),
                grid.seeds.len()
            );
            let sweep = kappa_sweep(&corpus, &grid, &base, &tcfg)?;
            for summary in &sweep.summaries {
                eprintln!(
                    "t0 {:>5} kappa {:>6}: median {:.6} [{:.6}, {:.6}] over {} cells",
                    summary.t0,
                    summary.kappa,
                    summary.median,
                    summary.lower_quartile,
                    summary.upper_quartile,
                    summary.completed
                );
            }
            match cli.out.as_ref() {
                Some(path) => emit_sweep(&sweep, path, (*format).into()),
                None => {
                    let text = match format {
                        FormatArg::Json => to_json_string(&sweep)?,
                        FormatArg::Csv => mmrnn::eval::sweep_csv(&sweep),
                    };
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Verb::Impute { data } => {
            let out = require_out(&cli, "impute")?;
            let policy = cli.baseline.impute_policy().ok_or_else(|| {
                Error::Config(format!(
                    "impute requires --baseline impute-mean, impute-forward, or impute-zero \
                     (got {})",
                    cli.baseline
                ))
            })?;
            let corpus = load_corpus(&cli, data)?;
            let regridded = impute(&corpus, policy)?;
            write_orders_csv(&regridded, &out)?;
            eprintln!(
                "regridded {} orders to {} daily steps; wrote {}",
                corpus.total_orders(),
                regridded.total_orders(),
                out.display()
            );
            Ok(())
        }
    }
}

/// Rebuild the evaluation context a saved model was trained under: the same
/// deterministic holdout split, and the same regridding for imputed
/// baselines.
fn evaluate_saved(corpus: &Dataset, model_path: &PathBuf) -> Result<EvalReport> {
    let text = std::fs::read_to_string(model_path)
        .map_err(|e| Error::io(model_path.display().to_string(), e))?;
    let saved: SavedModel = serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!(
            "{} is not a saved model: {e}",
            model_path.display()
        ))
    })?;
    if saved.item_ids != corpus.vocab.ids() {
        return Err(Error::Config(format!(
            "model was trained on a different vocabulary ({} items vs {})",
            saved.item_ids.len(),
            corpus.n_items()
        )));
    }
    let baseline: BaselineKind = saved.baseline.parse()?;
    let (train_split, holdout, _) = split_holdout_last(corpus);
    let (train_set, gap_fill) = match baseline.impute_policy() {
        None => (train_split, None),
        Some(policy) => {
            let mean = if policy == ImputePolicy::Mean {
                Some(global_mean_order(&train_split)?)
            } else {
                None
            };
            let imputed = impute_with_mean(&train_split, policy, mean.as_ref())?;
            (imputed, Some(HoldoutImputation { policy, mean }))
        }
    };
    evaluate_holdout(&saved.state, &train_set, &holdout, gap_fill.as_ref())
}
