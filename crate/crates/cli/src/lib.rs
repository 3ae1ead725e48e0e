//! Subcommands of the `layerwise` binary.
//!
//! Every command reads one JSON config (plus `--set key=value` overrides),
//! validates it before doing any work and writes its outputs to `out_dir`.
//! CSV outputs start with a `# config: {...}` line holding the resolved
//! config; JSON outputs carry it under `"config"`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use layerwise::config::ExperimentConfig;
use layerwise::experiments::{
    self, default_thresholds, final_test_error, group_by_config, read_provenance, read_runs_csv, run_seed,
    variance_scan, write_curves_csv, write_provenance, write_runs_csv, write_runtime_csv, AggregateStats,
};
use layerwise::training::{train, RunRecord, TrainingData};
use layerwise::Exec;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(
    name = "layerwise",
    version,
    about = "Layerwise learning experiments for parametrized quantum circuits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gradient variance over random circuits for a grid of qubits × layers.
    VarianceScan(Common),
    /// One training run of `strategy` at learning rate `eta`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Index of the run under the master seed.
        #[arg(long, default_value_t = 0)]
        run_index: usize,
    },
    /// `n_runs` runs of every (strategy, eta) pair; finished runs are reused.
    Sweep(Common),
    /// Encode MNIST into angle features and write the PCA model.
    Encode(Common),
    /// Recompute curves.csv and runtime.csv from a runs.csv.
    Report {
        /// The runs.csv to aggregate.
        #[arg(long)]
        runs: PathBuf,
        /// Output directory; defaults to the directory of `--runs`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file. Unset fields take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a top-level config field, e.g. `--set eta=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Worker threads (overrides `threads`; default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run everything on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

struct RunContext {
    cfg: ExperimentConfig,
    snapshot: Value,
    out: PathBuf,
    exec: Exec,
}

impl Common {
    fn resolve(&self) -> Result<RunContext> {
        let mut overrides = self.set.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("out_dir={}", serde_json::to_string(out)?));
        }
        if let Some(t) = self.threads {
            overrides.push(format!("threads={t}"));
        }
        let cfg = ExperimentConfig::load(self.config.as_deref(), &overrides)?;
        if let Some(t) = cfg.threads {
            if t == 0 {
                return Err(layerwise::error::Error::config("threads", "must be at least 1").into());
            }
            layerwise::exec::init_thread_pool(t);
        }
        let exec = if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        };
        let snapshot = serde_json::to_value(&cfg)?;
        let out = cfg.out_dir.clone();
        Ok(RunContext {
            cfg,
            snapshot,
            out,
            exec,
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Creates a CSV file whose first line is the config snapshot.
fn csv_with_provenance(path: &Path, snapshot: &Value) -> Result<fs::File> {
    let mut f = create_file(path)?;
    write_provenance(&mut f, snapshot)?;
    Ok(f)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::VarianceScan(common) => cmd_variance_scan(&common),
        Command::Train { common, run_index } => cmd_train(&common, run_index),
        Command::Sweep(common) => cmd_sweep(&common),
        Command::Encode(common) => cmd_encode(&common),
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    }
}

pub fn cmd_variance_scan(common: &Common) -> Result<()> {
    let ctx = common.resolve()?;
    let scan_cfg = ctx.cfg.variance_scan()?;
    create_dir(&ctx.out)?;
    let result = variance_scan(&scan_cfg, ctx.exec)?;
    let path = ctx.out.join("variance_scan.csv");
    result.write_csv(csv_with_provenance(&path, &ctx.snapshot)?)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn describe(record: &RunRecord) -> String {
    match final_test_error(record) {
        Some(e) => format!("final test error {e:.4}"),
        None => format!("diverged ({})", record.diverged.as_deref().unwrap_or("no epochs")),
    }
}

fn summary(record: &RunRecord) -> Value {
    let last = record.last_epoch();
    json!({
        "run_id": record.run_id,
        "config_label": record.config_label,
        "strategy": record.strategy,
        "seed": record.seed,
        "epochs": record.epochs.len(),
        "final_test_error": final_test_error(record),
        "last_train_loss": last.map(|e| e.train_loss),
        "cumulative_measurements": last.map(|e| e.cumulative_measurements),
        "wall_seconds_estimate": last.map(|e| e.wall_seconds_estimate),
        "diverged": record.diverged,
    })
}

/// Runs `index` of `run` with a run id derived from everything that
/// determines its outcome.
fn execute_run(
    cfg: &ExperimentConfig,
    run: &experiments::RunConfig,
    data: &TrainingData,
    index: usize,
    exec: Exec,
) -> Result<RunRecord> {
    let key = cfg.run_key(run)?;
    let mut record = train(
        &run.schedule()?,
        data,
        &run.train_options(run_seed(cfg.seed, index), exec),
        run.strategy,
        &run.label,
        key.clone(),
    )?;
    record.run_id = experiments::run_id(&key, index);
    Ok(record)
}

pub fn cmd_train(common: &Common, run_index: usize) -> Result<()> {
    let ctx = common.resolve()?;
    ctx.cfg.validate_training()?;
    let data = ctx.cfg.training_data()?;
    create_dir(&ctx.out)?;
    let run = ctx.cfg.run_config(ctx.cfg.strategy, ctx.cfg.eta);
    let record = execute_run(&ctx.cfg, &run, &data, run_index, ctx.exec)?;

    let runs = ctx.out.join("runs.csv");
    write_runs_csv([&record], csv_with_provenance(&runs, &ctx.snapshot)?)?;
    let mut s = summary(&record);
    s["config"] = ctx.snapshot.clone();
    s["final_params"] = json!(record.final_params);
    write_json(&ctx.out.join("summary.json"), &s)?;
    eprintln!("{}: {}, wrote {}", record.run_id, describe(&record), runs.display());
    Ok(())
}

pub fn cmd_sweep(common: &Common) -> Result<()> {
    let ctx = common.resolve()?;
    ctx.cfg.validate_training()?;
    let data = ctx.cfg.training_data()?;
    let run_dir = ctx.out.join("runs");
    create_dir(&run_dir)?;

    let configs = ctx.cfg.sweep_configs();
    let n_runs = ctx.cfg.n_runs;
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..n_runs).map(move |i| (c, i)))
        .collect();
    let records = ctx.exec.try_map(jobs.len(), |j| -> Result<RunRecord> {
        let (c, i) = jobs[j];
        let key = ctx.cfg.run_key(&configs[c])?;
        let path = run_dir.join(format!("{}.json", experiments::run_id(&key, i)));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(record) = serde_json::from_str::<RunRecord>(&text) {
                return Ok(record);
            }
        }
        let record = execute_run(&ctx.cfg, &configs[c], &data, i, ctx.exec)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string(&record)?).with_context(|| format!("cannot write {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("cannot write {}", path.display()))?;
        eprintln!(
            "{} {} run {i}: {}",
            record.run_id,
            record.config_label,
            describe(&record)
        );
        Ok(record)
    })?;

    write_runs_csv(&records, csv_with_provenance(&ctx.out.join("runs.csv"), &ctx.snapshot)?)?;
    let stats = group_by_config(records);
    write_aggregates(&ctx.out, &ctx.snapshot, &stats)?;
    let per_config: Vec<Value> = stats
        .iter()
        .map(|s| {
            json!({
                "config_label": s.label,
                "runs": s.records.len(),
                "success_probability_0.65": s.success_probability(0.65),
                "expected_repetitions_0.65": s.expected_repetitions(0.65),
            })
        })
        .collect();
    write_json(
        &ctx.out.join("summary.json"),
        &json!({ "config": ctx.snapshot, "configurations": per_config }),
    )?;
    eprintln!("wrote {}", ctx.out.display());
    Ok(())
}

fn write_aggregates(out: &Path, snapshot: &Value, stats: &[AggregateStats]) -> Result<()> {
    write_curves_csv(
        stats,
        &default_thresholds(),
        csv_with_provenance(&out.join("curves.csv"), snapshot)?,
    )?;
    write_runtime_csv(stats, csv_with_provenance(&out.join("runtime.csv"), snapshot)?)?;
    Ok(())
}

pub fn cmd_encode(common: &Common) -> Result<()> {
    let ctx = common.resolve()?;
    ctx.cfg.validate_data()?;
    let enc = ctx.cfg.encode()?;
    create_dir(&ctx.out)?;
    enc.train
        .write_csv(csv_with_provenance(&ctx.out.join("train.csv"), &ctx.snapshot)?)?;
    enc.test
        .write_csv(csv_with_provenance(&ctx.out.join("test.csv"), &ctx.snapshot)?)?;
    write_json(
        &ctx.out.join("pca.json"),
        &json!({ "config": ctx.snapshot, "model": enc.model, "split": enc.split }),
    )?;
    eprintln!(
        "encoded {} train and {} test samples into {}",
        enc.train.len(),
        enc.test.len(),
        ctx.out.display()
    );
    Ok(())
}

pub fn cmd_report(runs: &Path, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(runs).with_context(|| format!("cannot read {}", runs.display()))?;
    let snapshot = read_provenance(&text).unwrap_or(Value::Null);
    let records = read_runs_csv(text.as_bytes())?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| runs.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    write_aggregates(&out, &snapshot, &group_by_config(records))?;
    eprintln!("wrote {}", out.join("curves.csv").display());
    Ok(())
}
