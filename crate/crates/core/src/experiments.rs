//! Experiment harnesses: the gradient-variance scan, repeated training runs
//! and the statistics derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuits::{uniform_angles, CircuitTemplate, LayerStreams, Prefix};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gradients::{adjoint_grad, shift_grad, Estimator};
use crate::rng::{self, domain};
use crate::sim::{Axis, StateVector};
use crate::training::{
    cdl_schedule, ll_schedule, train, EpochRecord, InitMode, LlConfig, ParameterStore, RunRecord, Strategy,
    TrainOptions, TrainingData, TrainingSchedule,
};

/// Sampling rate of the runtime model, in measurements per second.
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 10_000.0;

/// Number of trailing epochs averaged into a run's final test error.
pub const FINAL_WINDOW: usize = 10;

/// Seconds needed to take `measurements` samples at `rate` per second.
pub fn runtime_estimate(measurements: u64, rate: f64) -> Result<f64> {
    if rate.is_nan() || rate <= 0.0 {
        return Err(Error::config("sample_rate_hz", "must be positive"));
    }
    Ok(measurements as f64 / rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientTarget {
    /// The first slot of the first layer, always a Y rotation.
    #[default]
    FirstSlot,
    /// Per-slot variances averaged over every slot.
    AllSlots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScanConfig {
    pub qubits: Vec<usize>,
    pub layers: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub target: GradientTarget,
}

impl Default for VarianceScanConfig {
    fn default() -> Self {
        Self {
            qubits: vec![2, 4, 6, 8, 10, 12],
            layers: vec![1, 5, 10, 20, 50, 100],
            trials: 1000,
            seed: 0,
            target: GradientTarget::FirstSlot,
        }
    }
}

impl VarianceScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.qubits.is_empty() || self.qubits.iter().any(|&n| !(2..=crate::sim::MAX_QUBITS).contains(&n)) {
            return Err(Error::config("qubits", "every entry must lie in 2..=24"));
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return Err(Error::config("layers", "every entry must be at least 1"));
        }
        if self.trials < 2 {
            return Err(Error::config("trials", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCell {
    pub n_qubits: usize,
    pub n_layers: usize,
    pub mean: f64,
    /// Standard error of `mean`.
    pub mean_stderr: f64,
    /// Unbiased sample variance of the gradient.
    pub variance: f64,
    /// Large-sample standard error of `variance`.
    pub variance_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceScanResult {
    pub config: VarianceScanConfig,
    pub cells: Vec<VarianceCell>,
}

impl VarianceScanResult {
    pub fn cell(&self, n_qubits: usize, n_layers: usize) -> Option<&VarianceCell> {
        self.cells
            .iter()
            .find(|c| c.n_qubits == n_qubits && c.n_layers == n_layers)
    }

    /// `n_qubits,n_layers,variance,stderr,mean,mean_stderr`
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n_qubits", "n_layers", "variance", "stderr", "mean", "mean_stderr"])?;
        for c in &self.cells {
            out.write_record([
                c.n_qubits.to_string(),
                c.n_layers.to_string(),
                c.variance.to_string(),
                c.variance_stderr.to_string(),
                c.mean.to_string(),
                c.mean_stderr.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// The random circuit of one scan trial: a Hadamard wall, `n_layers` random
/// layers with slot 0 forced to a Y rotation, and `U(0, 2π)` angles.
pub fn scan_instance(
    n_qubits: usize,
    n_layers: usize,
    seed: u64,
    trial: usize,
) -> Result<(CircuitTemplate, ParameterStore)> {
    let key = rng::derive_seed(seed, &[domain::SCAN, n_qubits as u64, n_layers as u64, trial as u64]);
    let mut t = CircuitTemplate::random(n_qubits, n_layers, Prefix::HadamardWall, &LayerStreams::new(key))?;
    t.layers_mut()[0].rotations[0].axis = Axis::Y;
    let angles = uniform_angles(t.n_params(), &mut rng::stream(key, &[domain::INIT]));
    Ok((t, ParameterStore::from_values(angles)))
}

struct Moments {
    mean: f64,
    mean_stderr: f64,
    variance: f64,
    variance_stderr: f64,
}

fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    Moments {
        mean,
        mean_stderr: (variance / n).sqrt(),
        variance,
        variance_stderr: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    }
}

/// Gradient statistics of the readout `<Z>` over random circuits, for every
/// (qubits, layers) pair.
pub fn variance_scan(cfg: &VarianceScanConfig, exec: Exec) -> Result<VarianceScanResult> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &n in &cfg.qubits {
        for &l in &cfg.layers {
            let zero = StateVector::zero(n)?;
            let per_trial = exec.try_map(cfg.trials, |trial| -> Result<Vec<f64>> {
                let (t, p) = scan_instance(n, l, cfg.seed, trial)?;
                match cfg.target {
                    GradientTarget::FirstSlot => Ok(vec![shift_grad(&t, &p, 0, &zero, &Estimator::Exact)?]),
                    GradientTarget::AllSlots => adjoint_grad(&t, &p, &zero),
                }
            })?;
            let slots = per_trial[0].len();
            let stats: Vec<Moments> = (0..slots)
                .map(|s| moments(&per_trial.iter().map(|g| g[s]).collect::<Vec<_>>()))
                .collect();
            let avg = |f: fn(&Moments) -> f64| stats.iter().map(f).sum::<f64>() / slots as f64;
            cells.push(VarianceCell {
                n_qubits: n,
                n_layers: l,
                mean: avg(|m| m.mean),
                mean_stderr: avg(|m| m.mean_stderr),
                variance: avg(|m| m.variance),
                variance_stderr: avg(|m| m.variance_stderr),
            });
        }
    }
    Ok(VarianceScanResult {
        config: cfg.clone(),
        cells,
    })
}

/// Ordinary least squares `y = slope·x + intercept`; returns
/// `(slope, intercept, r²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Everything that defines one training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub label: String,
    pub strategy: Strategy,
    pub n_qubits: usize,
    pub layers: usize,
    /// Layerwise hyperparameters (ignored by the complete-depth strategies,
    /// except `total_layers`).
    pub ll: LlConfig,
    /// Epoch budget of the complete-depth strategies.
    pub cdl_epochs: usize,
    pub estimator: Estimator,
    pub eta: f64,
    pub batch_size: usize,
    pub circuit_seed: u64,
    pub sample_rate_hz: f64,
}

impl RunConfig {
    pub fn schedule(&self) -> Result<TrainingSchedule> {
        match self.strategy {
            Strategy::Ll => ll_schedule(&LlConfig {
                total_layers: self.layers,
                ..self.ll.clone()
            }),
            Strategy::CdlZero => cdl_schedule(self.layers, self.cdl_epochs, InitMode::Zero),
            Strategy::CdlRandom => cdl_schedule(self.layers, self.cdl_epochs, InitMode::Uniform),
        }
    }

    pub fn train_options(&self, seed: u64, exec: Exec) -> TrainOptions {
        TrainOptions {
            n_qubits: self.n_qubits,
            circuit_seed: self.circuit_seed,
            seed,
            estimator: self.estimator,
            eta: self.eta,
            batch_size: self.batch_size,
            sample_rate_hz: self.sample_rate_hz,
            exec,
        }
    }
}

/// Short stable identifier of run `index` of a configuration.
pub fn run_id(config: &serde_json::Value, index: usize) -> String {
    let mut h = Sha256::new();
    h.update(config.to_string().as_bytes());
    h.update(b"#");
    h.update(index.to_le_bytes());
    h.finalize()[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed of run `index` under `master_seed`.
pub fn run_seed(master_seed: u64, index: usize) -> u64 {
    rng::derive_seed(master_seed, &[domain::RUN, index as u64])
}

/// A single run of `cfg` with index `index`.
pub fn single_run(
    cfg: &RunConfig,
    data: &TrainingData,
    master_seed: u64,
    index: usize,
    exec: Exec,
) -> Result<RunRecord> {
    let snapshot = serde_json::to_value(cfg)?;
    let schedule = cfg.schedule()?;
    let seed = run_seed(master_seed, index);
    let mut record = train(
        &schedule,
        data,
        &cfg.train_options(seed, exec),
        cfg.strategy,
        &cfg.label,
        snapshot.clone(),
    )?;
    record.run_id = run_id(&snapshot, index);
    Ok(record)
}

/// `n_runs` independent runs of one configuration.
pub fn multi_run(
    cfg: &RunConfig,
    data: &TrainingData,
    n_runs: usize,
    master_seed: u64,
    exec: Exec,
) -> Result<AggregateStats> {
    if n_runs == 0 {
        return Err(Error::config("n_runs", "must be at least 1"));
    }
    let records = exec.try_map(n_runs, |i| single_run(cfg, data, master_seed, i, exec))?;
    Ok(AggregateStats {
        label: cfg.label.clone(),
        records,
    })
}

/// Mean test error over the last [`FINAL_WINDOW`] epochs, or `None` for a
/// diverged or empty run.
pub fn final_test_error(record: &RunRecord) -> Option<f64> {
    if record.is_diverged() || record.epochs.is_empty() {
        return None;
    }
    let tail = &record.epochs[record.epochs.len().saturating_sub(FINAL_WINDOW)..];
    Some(tail.iter().map(|e| e.test_error).sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub runtime_seconds: f64,
    pub mean_test_error: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessPoint {
    pub threshold: f64,
    pub success_probability: f64,
    pub expected_repetitions: f64,
}

/// The runs of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub label: String,
    pub records: Vec<RunRecord>,
}

impl AggregateStats {
    /// Fraction of runs whose final accuracy `1 - error` reaches `threshold`.
    /// Diverged runs count as failures.
    pub fn success_probability(&self, threshold: f64) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let hits = self
            .records
            .iter()
            .filter_map(final_test_error)
            .filter(|e| 1.0 - e >= threshold)
            .count();
        hits as f64 / self.records.len() as f64
    }

    pub fn expected_repetitions(&self, threshold: f64) -> f64 {
        expected_repetitions(self.success_probability(threshold))
    }

    /// Runs that beat random guessing (final error below 0.5).
    pub fn successful_runs(&self) -> impl Iterator<Item = &RunRecord> {
        self.records
            .iter()
            .filter(|r| final_test_error(r).is_some_and(|e| e < 0.5))
    }

    /// Mean test error per epoch over the successful runs, against estimated
    /// runtime. Runtime is identical across runs of one configuration; the
    /// mean is reported anyway.
    pub fn runtime_curve(&self) -> Vec<CurvePoint> {
        let mut by_epoch: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for r in self.successful_runs() {
            for e in &r.epochs {
                let acc = by_epoch.entry(e.epoch).or_default();
                acc.0 += e.wall_seconds_estimate;
                acc.1 += e.test_error;
                acc.2 += 1;
            }
        }
        by_epoch
            .into_iter()
            .map(|(epoch, (t, err, n))| CurvePoint {
                epoch,
                runtime_seconds: t / n as f64,
                mean_test_error: err / n as f64,
                runs: n,
            })
            .collect()
    }

    pub fn success_curve(&self, thresholds: &[f64]) -> Vec<SuccessPoint> {
        thresholds
            .iter()
            .map(|&t| {
                let p = self.success_probability(t);
                SuccessPoint {
                    threshold: t,
                    success_probability: p,
                    expected_repetitions: expected_repetitions(p),
                }
            })
            .collect()
    }
}

/// `1/p`, or infinity when `p` is zero.
pub fn expected_repetitions(probability: f64) -> f64 {
    if probability > 0.0 {
        1.0 / probability
    } else {
        f64::INFINITY
    }
}

/// Accuracy thresholds `0.50, 0.51, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (50..=100).map(|i| f64::from(i) / 100.0).collect()
}

/// Leading comment line that carries the config snapshot of a CSV output.
pub const PROVENANCE_PREFIX: &str = "# config: ";

/// Writes `config` as a single `# config: {...}` line.
pub fn write_provenance<W: std::io::Write>(mut w: W, config: &serde_json::Value) -> Result<()> {
    writeln!(w, "{PROVENANCE_PREFIX}{config}").map_err(|e| Error::io("<csv>", e))
}

/// The config snapshot of a CSV written after [`write_provenance`].
pub fn read_provenance(text: &str) -> Option<serde_json::Value> {
    let line = text.lines().next()?.strip_prefix(PROVENANCE_PREFIX)?;
    serde_json::from_str(line).ok()
}

/// CSV reader that skips `#` comment lines.
pub(crate) fn csv_reader<R: std::io::Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r)
}

pub const RUNS_CSV_HEADER: [&str; 11] = [
    "run_id",
    "strategy",
    "epoch",
    "segment",
    "n_trainable",
    "train_loss",
    "test_error",
    "cumulative_measurements",
    "wall_seconds_estimate",
    "config",
    "status",
];

/// One row per recorded epoch. A diverged run gets a trailing row with
/// `status = diverged` and empty metrics, so the run stays countable even
/// when it diverged before its first epoch.
pub fn write_runs_csv<'a, W: std::io::Write>(records: impl IntoIterator<Item = &'a RunRecord>, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RUNS_CSV_HEADER)?;
    for r in records {
        for e in &r.epochs {
            out.write_record([
                r.run_id.clone(),
                r.strategy.to_string(),
                e.epoch.to_string(),
                e.segment.to_string(),
                e.n_trainable.to_string(),
                e.train_loss.to_string(),
                e.test_error.to_string(),
                e.cumulative_measurements.to_string(),
                e.wall_seconds_estimate.to_string(),
                r.config_label.clone(),
                "ok".to_string(),
            ])?;
        }
        if r.is_diverged() {
            let mut row = vec![r.run_id.clone(), r.strategy.to_string()];
            row.extend(std::iter::repeat_n(String::new(), 7));
            row.push(r.config_label.clone());
            row.push("diverged".to_string());
            out.write_record(&row)?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads back a runs CSV. Only the columns present in the file are
/// restored: seeds, parameters and config snapshots are left empty.
pub fn read_runs_csv<R: std::io::Read>(r: R) -> Result<Vec<RunRecord>> {
    let mut rdr = csv_reader(r);
    let mut records: Vec<RunRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let bad = |col: &str| Error::usage(format!("bad `{col}` in runs CSV row {row:?}"));
        let run_id = row[0].to_string();
        let slot = *index.entry(run_id.clone()).or_insert_with(|| {
            records.push(RunRecord {
                run_id: run_id.clone(),
                strategy: Strategy::Ll,
                config_label: String::new(),
                seed: 0,
                circuit_seed: 0,
                epochs: Vec::new(),
                diverged: None,
                final_params: Vec::new(),
                config: serde_json::Value::Null,
            });
            records.len() - 1
        });
        let rec = &mut records[slot];
        rec.strategy = row[1].parse()?;
        rec.config_label = row[9].to_string();
        if &row[10] == "diverged" {
            rec.diverged = Some("diverged".to_string());
            continue;
        }
        rec.epochs.push(EpochRecord {
            epoch: row[2].parse().map_err(|_| bad("epoch"))?,
            segment: row[3].parse().map_err(|_| bad("segment"))?,
            n_trainable: row[4].parse().map_err(|_| bad("n_trainable"))?,
            train_loss: row[5].parse().map_err(|_| bad("train_loss"))?,
            test_error: row[6].parse().map_err(|_| bad("test_error"))?,
            cumulative_measurements: row[7].parse().map_err(|_| bad("cumulative_measurements"))?,
            forward_measurements: 0,
            wall_seconds_estimate: row[8].parse().map_err(|_| bad("wall_seconds_estimate"))?,
        });
    }
    Ok(records)
}

/// Groups records by configuration label, keeping first-seen order.
pub fn group_by_config(records: Vec<RunRecord>) -> Vec<AggregateStats> {
    let mut groups: Vec<AggregateStats> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| g.label == r.config_label) {
            Some(g) => g.records.push(r),
            None => groups.push(AggregateStats {
                label: r.config_label.clone(),
                records: vec![r],
            }),
        }
    }
    groups
}

/// `config,threshold,success_prob,expected_reps`
pub fn write_curves_csv<W: std::io::Write>(stats: &[AggregateStats], thresholds: &[f64], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config", "threshold", "success_prob", "expected_reps"])?;
    for s in stats {
        for p in s.success_curve(thresholds) {
            out.write_record([
                s.label.clone(),
                p.threshold.to_string(),
                p.success_probability.to_string(),
                p.expected_repetitions.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// `config,epoch,runtime_seconds,mean_test_error,runs`
pub fn write_runtime_csv<W: std::io::Write>(stats: &[AggregateStats], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config", "epoch", "runtime_seconds", "mean_test_error", "runs"])?;
    for s in stats {
        for p in s.runtime_curve() {
            out.write_record([
                s.label.clone(),
                p.epoch.to_string(),
                p.runtime_seconds.to_string(),
                p.mean_test_error.to_string(),
                p.runs.to_string(),
            ])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
