//! Loss, masked Adam, layerwise / complete-depth schedules and the training
//! loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::circuits::{uniform_angles, CircuitTemplate, DataEncoding, LayerStreams, Prefix};
use crate::data::EncodedDataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::experiments::runtime_estimate;
use crate::gradients::{batch_loss_grad, rescale, Estimator, LabeledInput};
use crate::rng::{self, domain};
use crate::sim::run_circuit;

/// Probabilities are kept inside `[CLIP, 1 - CLIP]` before any logarithm.
pub const CLIP: f64 = 1e-15;

#[inline]
pub fn clip_probability(e: f64) -> f64 {
    e.clamp(CLIP, 1.0 - CLIP)
}

/// Binary cross entropy `-(y ln E + (1 - y) ln(1 - E))` with `E` clipped.
pub fn bce_loss(e: f64, y: f64) -> f64 {
    let e = clip_probability(e);
    -(y * e.ln() + (1.0 - y) * (1.0 - e).ln())
}

/// `dL/dE` of [`bce_loss`], evaluated at the clipped `E`.
pub fn bce_loss_grad(e: f64, y: f64) -> f64 {
    let e = clip_probability(e);
    -y / e + (1.0 - y) / (1.0 - e)
}

/// Circuit angles plus a trainable mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    values: Vec<f64>,
    trainable: Vec<bool>,
}

impl ParameterStore {
    /// All-zero angles, all trainable.
    pub fn zeros(n: usize) -> Self {
        Self::from_values(vec![0.0; n])
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let trainable = vec![true; values.len()];
        Self { values, trainable }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_trainable(&self, slot: usize) -> bool {
        self.trainable[slot]
    }

    /// Trainable slots in ascending order.
    pub fn trainable_slots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.trainable[i]).collect()
    }

    /// Marks exactly `slots` as trainable and freezes everything else.
    pub fn set_trainable(&mut self, slots: &[usize]) -> Result<()> {
        if let Some(&bad) = slots.iter().find(|&&s| s >= self.len()) {
            return Err(Error::usage(format!("slot {bad} out of range")));
        }
        self.trainable.iter_mut().for_each(|t| *t = false);
        slots.iter().for_each(|&s| self.trainable[s] = true);
        Ok(())
    }

    /// Appends new frozen slots with the given angles.
    pub fn extend(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.values.push(v);
            self.trainable.push(false);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Adam over the trainable slots of a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub step: u64,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_trainable: usize, eta: f64) -> Self {
        Self {
            m1: vec![0.0; n_trainable],
            m2: vec![0.0; n_trainable],
            step: 0,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `grads[k]` belongs to the k-th trainable
/// slot of `params` in ascending order; frozen slots are not touched.
pub fn adam_step(state: &mut AdamState, grads: &[f64], params: &mut ParameterStore) -> Result<()> {
    let slots = params.trainable_slots();
    if grads.len() != slots.len() || state.m1.len() != slots.len() {
        return Err(Error::usage(format!(
            "{} gradients for {} trainable slots (optimizer sized {})",
            grads.len(),
            slots.len(),
            state.m1.len()
        )));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!("non-finite gradient {g}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, &slot) in slots.iter().enumerate() {
        let g = grads[k];
        state.m1[k] = state.beta1 * state.m1[k] + (1.0 - state.beta1) * g;
        state.m2[k] = state.beta2 * state.m2[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m1[k] / c1;
        let v_hat = state.m2[k] / c2;
        params.values[slot] -= state.eta * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    One,
    Two,
}

/// Angle initialization for slots as they are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Zero,
    /// Independent `U(0, 2π)` draws.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Number of layers present in the circuit during this segment.
    pub depth: usize,
    /// Layers whose slots are trained, ascending.
    pub trainable_layers: Vec<usize>,
    pub epochs: usize,
    pub phase: Phase,
}

impl Segment {
    pub fn trainable_slots(&self, n_qubits: usize) -> Vec<usize> {
        self.trainable_layers
            .iter()
            .flat_map(|&l| l * n_qubits..(l + 1) * n_qubits)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub total_layers: usize,
    pub init: InitMode,
    pub segments: Vec<Segment>,
}

impl TrainingSchedule {
    pub fn total_epochs(&self) -> usize {
        self.segments.iter().map(|s| s.epochs).sum()
    }

    /// Layer blocks that are added to the circuit together, in order.
    pub fn growth_blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut blocks = Vec::new();
        let mut depth = 0;
        for s in &self.segments {
            if s.depth > depth {
                blocks.push(depth..s.depth);
                depth = s.depth;
            }
        }
        blocks
    }
}

/// Layerwise-learning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlConfig {
    pub total_layers: usize,
    /// Start layers `s`.
    pub start_layers: usize,
    /// Layers added per growth step `p`.
    pub layers_per_step: usize,
    /// Only the most recent `q` layers train during phase one.
    pub freeze_window: usize,
    /// Epochs per segment `e_l`.
    pub epochs_per_segment: usize,
    /// Fraction of the layers trained at once in phase two.
    pub phase_two_fraction: f64,
    pub sweeps: usize,
    /// Keep the start layers trainable throughout phase one.
    pub initial_always_active: bool,
}

impl Default for LlConfig {
    fn default() -> Self {
        Self {
            total_layers: 21,
            start_layers: 1,
            layers_per_step: 2,
            freeze_window: 2,
            epochs_per_segment: 10,
            phase_two_fraction: 0.5,
            sweeps: 2,
            initial_always_active: true,
        }
    }
}

/// Number of contiguous phase-two blocks for fraction `r`, i.e. `⌈1/r⌉`.
pub fn phase_two_blocks(r: f64) -> usize {
    ((1.0 / r) - 1e-9).ceil().max(1.0) as usize
}

/// Splits `0..total` into `k` contiguous blocks whose sizes differ by at
/// most one; the larger blocks come last.
pub fn contiguous_blocks(total: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let k = k.min(total).max(1);
    let base = total / k;
    let extra = total % k;
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i >= k - extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn ll_schedule(cfg: &LlConfig) -> Result<TrainingSchedule> {
    let LlConfig {
        total_layers,
        start_layers: s,
        layers_per_step: p,
        freeze_window: q,
        epochs_per_segment: e,
        phase_two_fraction: r,
        sweeps,
        initial_always_active,
    } = *cfg;
    if s == 0 {
        return Err(Error::config("start_layers", "must be at least 1"));
    }
    if p == 0 {
        return Err(Error::config("layers_per_step", "must be at least 1"));
    }
    if q < p {
        return Err(Error::config("freeze_window", "must be at least layers_per_step"));
    }
    if e == 0 {
        return Err(Error::config("epochs_per_segment", "must be at least 1"));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config("phase_two_fraction", "must lie in (0, 1]"));
    }
    if total_layers < s || (total_layers - s) % p != 0 {
        return Err(Error::config(
            "layers",
            format!("{total_layers} layers cannot be reached from {s} start layers in steps of {p}"),
        ));
    }

    let mut segments = vec![Segment {
        depth: s,
        trainable_layers: (0..s).collect(),
        epochs: e,
        phase: Phase::One,
    }];
    let mut depth = s;
    while depth < total_layers {
        depth += p;
        let mut layers: Vec<usize> = (depth.saturating_sub(q)..depth).collect();
        if initial_always_active {
            layers.extend(0..s);
            layers.sort_unstable();
            layers.dedup();
        }
        segments.push(Segment {
            depth,
            trainable_layers: layers,
            epochs: e,
            phase: Phase::One,
        });
    }
    let blocks = contiguous_blocks(total_layers, phase_two_blocks(r));
    for _ in 0..sweeps {
        for b in &blocks {
            segments.push(Segment {
                depth: total_layers,
                trainable_layers: b.clone().collect(),
                epochs: e,
                phase: Phase::Two,
            });
        }
    }
    Ok(TrainingSchedule {
        total_layers,
        init: InitMode::Zero,
        segments,
    })
}

/// One segment training every layer of the full-depth circuit.
pub fn cdl_schedule(total_layers: usize, epochs: usize, init: InitMode) -> Result<TrainingSchedule> {
    if total_layers == 0 {
        return Err(Error::config("layers", "must be at least 1"));
    }
    if epochs == 0 {
        return Err(Error::config("epochs", "must be at least 1"));
    }
    Ok(TrainingSchedule {
        total_layers,
        init,
        segments: vec![Segment {
            depth: total_layers,
            trainable_layers: (0..total_layers).collect(),
            epochs,
            phase: Phase::One,
        }],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "ll")]
    Ll,
    #[serde(rename = "cdl-zero")]
    CdlZero,
    #[serde(rename = "cdl-random")]
    CdlRandom,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Ll => "ll",
            Strategy::CdlZero => "cdl-zero",
            Strategy::CdlRandom => "cdl-random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ll" => Ok(Strategy::Ll),
            "cdl-zero" => Ok(Strategy::CdlZero),
            "cdl-random" => Ok(Strategy::CdlRandom),
            other => Err(Error::config(
                "strategy",
                format!("unknown strategy `{other}` (expected ll, cdl-zero or cdl-random)"),
            )),
        }
    }
}

/// Exact outputs `E ∈ [0, 1]` for every sample.
pub fn predict(template: &CircuitTemplate, params: &ParameterStore, set: &[LabeledInput]) -> Result<Vec<f64>> {
    set.iter()
        .map(|s| {
            let out = run_circuit(template, params, &s.state)?;
            Ok(rescale(out.z_exact(template.readout_qubit())))
        })
        .collect()
}

/// Fraction misclassified with exact expectations; `E <= 0.5` predicts class 0.
pub fn test_error(template: &CircuitTemplate, params: &ParameterStore, test: &[LabeledInput]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::usage("test set is empty"));
    }
    let preds = predict(template, params, test)?;
    let wrong = preds
        .iter()
        .zip(test)
        .filter(|(&e, s)| u8::from(e > 0.5) != s.label)
        .count();
    Ok(wrong as f64 / test.len() as f64)
}

/// Mean exact cross entropy over `set`.
pub fn mean_loss(template: &CircuitTemplate, params: &ParameterStore, set: &[LabeledInput]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::usage("sample set is empty"));
    }
    let preds = predict(template, params, set)?;
    Ok(preds
        .iter()
        .zip(set)
        .map(|(&e, s)| bce_loss(e, f64::from(s.label)))
        .sum::<f64>()
        / set.len() as f64)
}

/// Knobs of a single training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub n_qubits: usize,
    /// Seed of the circuit instance; shared by every run of an experiment.
    pub circuit_seed: u64,
    /// Seed of this run: shuffling, shot noise and random initialization.
    pub seed: u64,
    pub estimator: Estimator,
    pub eta: f64,
    pub batch_size: usize,
    /// Sampling rate used for the runtime column.
    pub sample_rate_hz: f64,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across segments.
    pub epoch: usize,
    /// 0-based index into the schedule.
    pub segment: usize,
    pub n_trainable: usize,
    pub train_loss: f64,
    pub test_error: f64,
    /// Shift-rule measurements so far, `Σ 2·n_p·m·b`.
    pub cumulative_measurements: u64,
    /// Forward-pass measurements so far (not part of the runtime model).
    pub forward_measurements: u64,
    pub wall_seconds_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub strategy: Strategy,
    /// Label of the configuration this run belongs to (e.g. `ll_eta0.01`).
    pub config_label: String,
    pub seed: u64,
    pub circuit_seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Set when the run aborted on a non-finite loss, gradient or angle.
    pub diverged: Option<String>,
    pub final_params: Vec<f64>,
    /// Verbatim configuration snapshot.
    pub config: serde_json::Value,
}

impl RunRecord {
    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }

    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// The encoded training and test samples of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub train: Vec<LabeledInput>,
    pub test: Vec<LabeledInput>,
}

impl TrainingData {
    /// Turns encoded feature vectors into data-layer input states.
    pub fn from_encoded(train: &EncodedDataset, test: &EncodedDataset, encoding: DataEncoding) -> Result<Self> {
        let inputs = |d: &EncodedDataset| {
            d.features
                .iter()
                .zip(&d.labels)
                .map(|(f, &label)| {
                    Ok(LabeledInput {
                        state: encoding.encode(f)?,
                        label,
                    })
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            train: inputs(train)?,
            test: inputs(test)?,
        })
    }
}

/// Appends the layers of `block` to the template, enforces an X rotation in
/// them and initializes their slots.
fn grow_block(
    template: &mut CircuitTemplate,
    params: &mut ParameterStore,
    depth: usize,
    streams: &LayerStreams,
    init: InitMode,
    seed: u64,
) -> Result<()> {
    let start = template.n_layers();
    template.grow(depth - start, streams)?;
    template.enforce_x(start..depth, streams)?;
    let new_slots = template.n_params() - params.len();
    match init {
        InitMode::Zero => params.extend(std::iter::repeat_n(0.0, new_slots)),
        InitMode::Uniform => {
            let mut rng = rng::stream(seed, &[domain::INIT, start as u64]);
            params.extend(uniform_angles(new_slots, &mut rng));
        }
    }
    Ok(())
}

/// Builds the full-depth circuit a schedule trains, growing it block by
/// block exactly as [`train`] does.
pub fn build_template(schedule: &TrainingSchedule, n_qubits: usize, circuit_seed: u64) -> Result<CircuitTemplate> {
    let streams = LayerStreams::new(circuit_seed);
    let mut template = CircuitTemplate::new(n_qubits, Prefix::None)?;
    let mut scratch = ParameterStore::zeros(0);
    for block in schedule.growth_blocks() {
        grow_block(&mut template, &mut scratch, block.end, &streams, InitMode::Zero, 0)?;
    }
    Ok(template)
}

/// Trains one circuit following `schedule`.
///
/// The circuit starts empty and grows whenever a segment asks for more depth;
/// new slots are initialized per the schedule's [`InitMode`]. Each segment
/// gets a fresh optimizer. After every epoch the exact training loss and test
/// error are recorded together with the measurement ledger. A non-finite
/// loss, gradient or angle stops the run and flags it as diverged.
pub fn train(
    schedule: &TrainingSchedule,
    data: &TrainingData,
    opts: &TrainOptions,
    strategy: Strategy,
    config_label: &str,
    config: serde_json::Value,
) -> Result<RunRecord> {
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::usage("training and test sets must be non-empty"));
    }
    if opts.batch_size == 0 || opts.batch_size > data.train.len() {
        return Err(Error::config(
            "batch_size",
            format!("must lie in 1..={}", data.train.len()),
        ));
    }
    if !opts.eta.is_finite() || opts.eta <= 0.0 {
        return Err(Error::config("eta", "must be positive"));
    }
    opts.estimator.validate()?;

    let streams = LayerStreams::new(opts.circuit_seed);
    let mut template = CircuitTemplate::new(opts.n_qubits, Prefix::None)?;
    let mut params = ParameterStore::zeros(0);

    let mut record = RunRecord {
        run_id: String::new(),
        strategy,
        config_label: config_label.to_string(),
        seed: opts.seed,
        circuit_seed: opts.circuit_seed,
        epochs: Vec::new(),
        diverged: None,
        final_params: Vec::new(),
        config,
    };

    let mut measurements = 0u64;
    let mut forward = 0u64;
    let mut epoch = 0usize;
    let mut iteration = 0u64;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    'segments: for (seg_idx, segment) in schedule.segments.iter().enumerate() {
        if segment.depth > template.n_layers() {
            grow_block(
                &mut template,
                &mut params,
                segment.depth,
                &streams,
                schedule.init,
                opts.seed,
            )?;
        } else if segment.depth < template.n_layers() {
            return Err(Error::usage("schedules may not shrink the circuit"));
        }
        let slots = segment.trainable_slots(opts.n_qubits);
        params.set_trainable(&slots)?;
        let mut adam = AdamState::new(slots.len(), opts.eta);

        for _ in 0..segment.epochs {
            epoch += 1;
            order.shuffle(&mut rng::stream(opts.seed, &[domain::SHUFFLE, epoch as u64]));
            for chunk in order.chunks(opts.batch_size) {
                iteration += 1;
                let batch: Vec<LabeledInput> = chunk.iter().map(|&i| data.train[i].clone()).collect();
                let est = opts
                    .estimator
                    .with_seed(rng::derive_seed(opts.seed, &[domain::SHOTS, iteration]));
                let bg = batch_loss_grad(&template, &params, &slots, &batch, &est, opts.exec)?;
                measurements += bg.gradient_measurements;
                forward += bg.forward_measurements;
                if !bg.loss.is_finite() {
                    record.diverged = Some(format!("non-finite batch loss at iteration {iteration}"));
                    break 'segments;
                }
                match adam_step(&mut adam, &bg.grads, &mut params) {
                    Ok(()) => {}
                    Err(Error::Diverged(msg)) => {
                        record.diverged = Some(format!("{msg} at iteration {iteration}"));
                        break 'segments;
                    }
                    Err(e) => return Err(e),
                }
                if !params.all_finite() {
                    record.diverged = Some(format!("non-finite angle at iteration {iteration}"));
                    break 'segments;
                }
            }
            let train_loss = mean_loss(&template, &params, &data.train)?;
            let err = test_error(&template, &params, &data.test)?;
            if !train_loss.is_finite() {
                record.diverged = Some(format!("non-finite training loss after epoch {epoch}"));
                break 'segments;
            }
            record.epochs.push(EpochRecord {
                epoch,
                segment: seg_idx,
                n_trainable: slots.len(),
                train_loss,
                test_error: err,
                cumulative_measurements: measurements,
                forward_measurements: forward,
                wall_seconds_estimate: runtime_estimate(measurements, opts.sample_rate_hz)?,
            });
        }
    }
    record.final_params = params.values().to_vec();
    Ok(record)
}
