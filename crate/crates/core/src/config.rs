//! Experiment configuration: one flat JSON document per invocation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::circuits::DataEncoding;
use crate::data::{encode_dataset, load_idx, EncodeConfig, EncodedDataset, EncodedSplit, PcaScope, SplitTag};
use crate::error::{Error, Result};
use crate::experiments::{GradientTarget, RunConfig, VarianceScanConfig, DEFAULT_SAMPLE_RATE_HZ};
use crate::gradients::Estimator;
use crate::training::{LlConfig, Strategy, TrainingData};

/// Every setting any command reads. Defaults reproduce the 8-qubit,
/// 21-layer shot-noise setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_qubits: usize,
    pub layers: usize,
    pub strategy: Strategy,
    /// Strategies crossed with `etas` by `sweep`.
    pub strategies: Vec<Strategy>,
    pub etas: Vec<f64>,

    /// Start layers.
    pub s: usize,
    /// Layers added per step.
    pub p: usize,
    /// Trailing layers that stay trainable in phase one.
    pub q: usize,
    /// Epochs per segment.
    pub e_l: usize,
    /// Phase-two fraction.
    pub r: f64,
    pub sweeps: usize,
    pub initial_always_active: bool,
    pub cdl_epochs: usize,

    pub eta: f64,
    /// Batch size.
    pub b: usize,
    /// Shots per expectation; `null` selects exact expectations.
    pub m: Option<u32>,
    pub n_runs: usize,
    pub sample_rate_hz: f64,

    pub seed: u64,
    pub circuit_seed: u64,
    pub data_seed: u64,

    /// Directory with the IDX files; falls back to `$MNIST_DIR`.
    pub data_dir: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Previously encoded CSVs (`train.csv`/`test.csv`), used instead of the
    /// IDX pipeline when set.
    pub encoded_dir: Option<PathBuf>,
    pub classes: [u8; 2],
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub pca_scope: PcaScope,
    pub encoding: DataEncoding,

    pub qubits: Vec<usize>,
    pub scan_layers: Vec<usize>,
    pub trials: usize,
    pub gradient_target: GradientTarget,

    pub out_dir: PathBuf,
    /// Worker threads; `null` uses the available parallelism.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ll = LlConfig::default();
        let scan = VarianceScanConfig::default();
        Self {
            n_qubits: 8,
            layers: ll.total_layers,
            strategy: Strategy::Ll,
            strategies: vec![Strategy::Ll, Strategy::CdlZero],
            etas: vec![0.01, 0.005, 0.001],
            s: ll.start_layers,
            p: ll.layers_per_step,
            q: ll.freeze_window,
            e_l: ll.epochs_per_segment,
            r: ll.phase_two_fraction,
            sweeps: ll.sweeps,
            initial_always_active: ll.initial_always_active,
            cdl_epochs: 100,
            eta: 0.01,
            b: 20,
            m: Some(10),
            n_runs: 20,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            seed: 0,
            circuit_seed: 0,
            data_seed: 0,
            data_dir: None,
            images: None,
            labels: None,
            encoded_dir: None,
            classes: [6, 9],
            per_class_train: 50,
            per_class_test: 50,
            pca_scope: PcaScope::TrainSubset,
            encoding: DataEncoding::HalfAngle,
            qubits: scan.qubits,
            scan_layers: scan.layers,
            trials: scan.trials,
            gradient_target: scan.target,
            out_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

/// The config key behind a layerwise schedule field.
fn config_key(field: &str) -> &str {
    match field {
        "total_layers" => "layers",
        "start_layers" => "s",
        "layers_per_step" => "p",
        "freeze_window" => "q",
        "epochs_per_segment" => "e_l",
        "phase_two_fraction" => "r",
        other => other,
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

impl ExperimentConfig {
    /// Parses a JSON document and applies `key=value` overrides to its
    /// top-level fields. Override values are read as JSON when they parse,
    /// otherwise as strings.
    pub fn from_json_with_overrides(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut doc: serde_json::Value = match text {
            Some(t) => serde_json::from_str(t)?,
            None => serde_json::json!({}),
        };
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::config("<root>", "config must be a JSON object"))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must look like key=value"))?;
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            obj.insert(key.trim().to_string(), parsed);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| {
            let msg = e.to_string();
            let field = msg.split('`').nth(1).unwrap_or("<document>").to_string();
            Error::config(field, msg)
        })?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::from_json_with_overrides(text.as_deref(), overrides)
    }

    pub fn validate_training(&self) -> Result<()> {
        check(
            (1..=crate::sim::MAX_QUBITS).contains(&self.n_qubits),
            "n_qubits",
            "must lie in 1..=24",
        )?;
        check(self.layers >= 1, "layers", "must be at least 1")?;
        check(self.eta > 0.0 && self.eta.is_finite(), "eta", "must be positive")?;
        check(
            self.etas.iter().all(|e| *e > 0.0 && e.is_finite()),
            "etas",
            "must all be positive",
        )?;
        check(!self.etas.is_empty(), "etas", "must not be empty")?;
        check(!self.strategies.is_empty(), "strategies", "must not be empty")?;
        check(self.b >= 1, "b", "must be at least 1")?;
        check(
            self.b <= 2 * self.per_class_train,
            "b",
            "cannot exceed the training-set size",
        )?;
        check(self.m != Some(0), "m", "must be at least 1 (or null for exact)")?;
        check(self.n_runs >= 1, "n_runs", "must be at least 1")?;
        check(self.cdl_epochs >= 1, "cdl_epochs", "must be at least 1")?;
        check(self.sample_rate_hz > 0.0, "sample_rate_hz", "must be positive")?;
        check(self.threads != Some(0), "threads", "must be at least 1")?;
        self.validate_data()?;
        self.run_config(Strategy::Ll, self.eta)
            .schedule()
            .map_err(|e| match e {
                Error::Config { field, reason } => Error::config(config_key(&field), reason),
                other => other,
            })?;
        Ok(())
    }

    pub fn validate_data(&self) -> Result<()> {
        check(
            self.classes[0] != self.classes[1],
            "classes",
            "must name two different digits",
        )?;
        check(self.classes.iter().all(|&c| c <= 9), "classes", "must be digits 0-9")?;
        check(self.per_class_train >= 1, "per_class_train", "must be at least 1")?;
        check(self.per_class_test >= 1, "per_class_test", "must be at least 1")?;
        check(
            (1..=crate::sim::MAX_QUBITS).contains(&self.n_qubits),
            "n_qubits",
            "must lie in 1..=24",
        )?;
        Ok(())
    }

    pub fn variance_scan(&self) -> Result<VarianceScanConfig> {
        let cfg = VarianceScanConfig {
            qubits: self.qubits.clone(),
            layers: self.scan_layers.clone(),
            trials: self.trials,
            seed: self.seed,
            target: self.gradient_target,
        };
        cfg.validate().map_err(|e| match e {
            Error::Config { field, reason } if field == "layers" => Error::config("scan_layers", reason),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn estimator(&self) -> Estimator {
        match self.m {
            Some(shots) => Estimator::Shots { shots, seed: 0 },
            None => Estimator::Exact,
        }
    }

    pub fn ll(&self) -> LlConfig {
        LlConfig {
            total_layers: self.layers,
            start_layers: self.s,
            layers_per_step: self.p,
            freeze_window: self.q,
            epochs_per_segment: self.e_l,
            phase_two_fraction: self.r,
            sweeps: self.sweeps,
            initial_always_active: self.initial_always_active,
        }
    }

    /// Label of a (strategy, eta) configuration, e.g. `ll_eta0.01`.
    pub fn label(strategy: Strategy, eta: f64) -> String {
        format!("{strategy}_eta{eta}")
    }

    pub fn run_config(&self, strategy: Strategy, eta: f64) -> RunConfig {
        RunConfig {
            label: Self::label(strategy, eta),
            strategy,
            n_qubits: self.n_qubits,
            layers: self.layers,
            ll: self.ll(),
            cdl_epochs: self.cdl_epochs,
            estimator: self.estimator(),
            eta,
            batch_size: self.b,
            circuit_seed: self.circuit_seed,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// The (strategy × eta) grid of a sweep.
    pub fn sweep_configs(&self) -> Vec<RunConfig> {
        self.strategies
            .iter()
            .flat_map(|&s| self.etas.iter().map(move |&e| (s, e)))
            .map(|(s, e)| self.run_config(s, e))
            .collect()
    }

    /// Everything that determines the outcome of runs of `run`: the run
    /// configuration, the master seed and the data pipeline. Hashing this
    /// gives run ids that change whenever any of them does.
    pub fn run_key(&self, run: &RunConfig) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "run": serde_json::to_value(run)?,
            "seed": self.seed,
            "data": serde_json::to_value(self.encode_config())?,
            "encoding": serde_json::to_value(self.encoding)?,
            "encoded_dir": self.encoded_dir,
        }))
    }

    pub fn encode_config(&self) -> EncodeConfig {
        EncodeConfig {
            n_components: self.n_qubits,
            classes: self.classes,
            per_class_train: self.per_class_train,
            per_class_test: self.per_class_test,
            seed: self.data_seed,
            pca_scope: self.pca_scope,
        }
    }

    /// Image and label paths from explicit fields, `data_dir`, or `$MNIST_DIR`.
    pub fn idx_paths(&self) -> Result<(PathBuf, PathBuf)> {
        if let (Some(i), Some(l)) = (&self.images, &self.labels) {
            return Ok((i.clone(), l.clone()));
        }
        let dir = self
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(crate::data::DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Error::config(
                    "data_dir",
                    format!(
                        "no MNIST location: set data_dir, images/labels, or ${}",
                        crate::data::DATA_DIR_ENV
                    ),
                )
            })?;
        crate::data::locate_idx(&dir)
    }

    /// Loads MNIST and runs the encoding pipeline.
    pub fn encode(&self) -> Result<EncodedSplit> {
        self.validate_data()?;
        let (images, labels) = self.idx_paths()?;
        encode_dataset(&load_idx(&images, &labels)?, &self.encode_config())
    }

    /// Training and test inputs, read from `encoded_dir` when set and
    /// encoded from MNIST otherwise.
    pub fn training_data(&self) -> Result<TrainingData> {
        let (train, test) = match &self.encoded_dir {
            Some(dir) => {
                let read = |name: &str, tag| {
                    let path = dir.join(name);
                    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
                    EncodedDataset::read_csv(file, tag)
                };
                (read("train.csv", SplitTag::Train)?, read("test.csv", SplitTag::Test)?)
            }
            None => {
                let enc = self.encode()?;
                (enc.train, enc.test)
            }
        };
        for d in [&train, &test] {
            if d.features.iter().any(|f| f.len() != self.n_qubits) {
                return Err(Error::config(
                    "n_qubits",
                    format!(
                        "encoded {:?} features do not have {} components",
                        d.split, self.n_qubits
                    ),
                ));
            }
        }
        TrainingData::from_encoded(&train, &test, self.encoding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate_training().unwrap();
        let c = ExperimentConfig::default();
        assert_eq!(c.sweep_configs().len(), 6);
    }

    #[test]
    fn overrides_apply_and_errors_name_fields() {
        let c = ExperimentConfig::from_json_with_overrides(
            Some(r#"{"eta": 0.5, "strategy": "cdl-zero"}"#),
            &["eta=0.005".into(), "m=null".into(), "out_dir=results".into()],
        )
        .unwrap();
        assert_eq!(c.eta, 0.005);
        assert_eq!(c.m, None);
        assert_eq!(c.strategy, Strategy::CdlZero);
        assert_eq!(c.out_dir, PathBuf::from("results"));

        match ExperimentConfig::from_json_with_overrides(Some(r#"{"etaa": 1}"#), &[]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "etaa"),
            other => panic!("{other:?}"),
        }
        let c = ExperimentConfig {
            qubits: vec![1, 4],
            ..Default::default()
        };
        match c.variance_scan() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "qubits"),
            other => panic!("{other:?}"),
        }
        let c = ExperimentConfig {
            layers: 20,
            ..Default::default()
        };
        assert!(matches!(c.validate_training(), Err(Error::Config { field, .. }) if field == "layers"));
        let c = ExperimentConfig {
            m: Some(0),
            ..Default::default()
        };
        assert!(matches!(c.validate_training(), Err(Error::Config { field, .. }) if field == "m"));
        let c = ExperimentConfig {
            e_l: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate_training(), Err(Error::Config { field, .. }) if field == "e_l"));
        let c = ExperimentConfig {
            q: 1,
            ..Default::default()
        };
        assert!(matches!(c.validate_training(), Err(Error::Config { field, .. }) if field == "q"));
    }
}
