//! Parameter-shift gradients of the readout expectation, and the batch loss
//! gradient built on top of them.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::circuits::CircuitTemplate;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng::{self, domain};
use crate::sim::{sample_z, StateVector};
use crate::training::{bce_loss, bce_loss_grad, clip_probability, ParameterStore};

/// Prefactor of the two-term shift rule.
pub const SHIFT_PREFACTOR: f64 = 0.5;
/// Shift applied to the differentiated angle, `π / (4 · SHIFT_PREFACTOR)`.
pub const SHIFT: f64 = FRAC_PI_2;

/// How expectation values are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Estimator {
    Exact,
    /// `shots` measurements per expectation value. Draws come from streams
    /// keyed by `seed`, the sample index, the slot and the shift sign.
    Shots {
        shots: u32,
        seed: u64,
    },
}

impl Estimator {
    pub fn validate(&self) -> Result<()> {
        match self {
            Estimator::Shots { shots: 0, .. } => Err(Error::usage("shot count must be at least 1")),
            _ => Ok(()),
        }
    }

    /// Measurements charged per expectation value. Exact mode counts one so
    /// the ledger still tracks circuit evaluations.
    pub fn shots_per_expectation(&self) -> u64 {
        match self {
            Estimator::Exact => 1,
            Estimator::Shots { shots, .. } => u64::from(*shots),
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            Estimator::Exact => Estimator::Exact,
            Estimator::Shots { shots, .. } => Estimator::Shots { shots, seed },
        }
    }

    fn read(&self, state: &StateVector, qubit: usize, keys: [u64; 4]) -> f64 {
        self.read_value(state.z_exact(qubit), keys)
    }

    fn read_value(&self, z: f64, keys: [u64; 4]) -> f64 {
        match *self {
            Estimator::Exact => z,
            Estimator::Shots { shots, seed } => {
                let mut rng = rng::stream(seed, &keys);
                sample_z(z, shots, &mut rng)
            }
        }
    }
}

const FORWARD_KEY: u64 = u64::MAX;

fn shot_keys(sample: u64, slot: u64, sign: u64) -> [u64; 4] {
    [domain::SHOTS, sample, slot, sign]
}

fn check_inputs(template: &CircuitTemplate, params: &ParameterStore, input: &StateVector) -> Result<()> {
    if params.len() != template.n_params() {
        return Err(Error::usage(format!(
            "template has {} slots, parameter store has {}",
            template.n_params(),
            params.len()
        )));
    }
    if input.n_qubits() != template.n_qubits() {
        return Err(Error::usage("input qubit count does not match the template"));
    }
    Ok(())
}

/// Forward pass that keeps the state in front of every layer, so a shifted
/// evaluation only replays the layers from the shifted one onwards.
struct Trajectory {
    before_layer: Vec<StateVector>,
    output: StateVector,
}

impl Trajectory {
    fn new(template: &CircuitTemplate, angles: &[f64], input: &StateVector) -> Result<Self> {
        let mut state = input.clone();
        template.prefix().apply(&mut state)?;
        let mut before_layer = Vec::with_capacity(template.n_layers());
        for k in 0..template.n_layers() {
            before_layer.push(state.clone());
            template.apply_layer(&mut state, k, angles, None);
        }
        Ok(Self {
            before_layer,
            output: state,
        })
    }

    fn shifted(&self, template: &CircuitTemplate, angles: &[f64], slot: usize, delta: f64) -> StateVector {
        let layer = template.layer_of_slot(slot);
        let mut state = self.before_layer[layer].clone();
        template.apply_layer(&mut state, layer, angles, Some((slot, delta)));
        template.apply_layers(&mut state, angles, layer + 1..template.n_layers());
        state
    }

    /// `d<Z_readout>/dθ_slot` by the shift rule.
    fn shift_grad(&self, template: &CircuitTemplate, angles: &[f64], slot: usize, est: &Estimator, sample: u64) -> f64 {
        let q = template.readout_qubit();
        let plus = est.read(
            &self.shifted(template, angles, slot, SHIFT),
            q,
            shot_keys(sample, slot as u64, 0),
        );
        let minus = est.read(
            &self.shifted(template, angles, slot, -SHIFT),
            q,
            shot_keys(sample, slot as u64, 1),
        );
        SHIFT_PREFACTOR * (plus - minus)
    }
}

/// Exact `<Z_readout>` and its derivative with respect to every slot in
/// layers `first_layer..`, from one forward and one reverse sweep. Slots in
/// earlier layers are left at zero.
fn adjoint_sweep(
    template: &CircuitTemplate,
    angles: &[f64],
    input: &StateVector,
    first_layer: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut psi = input.clone();
    template.prefix().apply(&mut psi)?;
    template.apply_layers(&mut psi, angles, 0..template.n_layers());
    Ok(reverse_sweep(template, angles, psi, first_layer))
}

/// Reverse pass from the circuit output `psi`.
fn reverse_sweep(
    template: &CircuitTemplate,
    angles: &[f64],
    mut psi: StateVector,
    first_layer: usize,
) -> (f64, Vec<f64>) {
    let q = template.readout_qubit();
    let z = psi.z_exact(q);
    let mut lambda = psi.clone();
    lambda.apply_z(q);
    let mut grads = vec![0.0; template.n_params()];
    for layer in template.layers()[first_layer..].iter().rev() {
        layer.entangler.apply(&mut psi);
        layer.entangler.apply(&mut lambda);
        for r in layer.rotations.iter().rev() {
            grads[r.slot] = lambda.pauli_overlap_im(&psi, r.qubit, r.axis);
            psi.rotate(r.qubit, r.axis, -angles[r.slot]);
            lambda.rotate(r.qubit, r.axis, -angles[r.slot]);
        }
    }
    (z, grads)
}

/// Exact `d<Z_readout>/dθ` for every slot by reverse-mode differentiation.
/// Agrees with the exact shift rule up to rounding.
pub fn adjoint_grad(template: &CircuitTemplate, params: &ParameterStore, input: &StateVector) -> Result<Vec<f64>> {
    check_inputs(template, params, input)?;
    Ok(adjoint_sweep(template, params.values(), input, 0)?.1)
}

/// Expectation `<Z_readout>` of the full circuit, exact or sampled.
pub fn expectation(
    template: &CircuitTemplate,
    params: &ParameterStore,
    input: &StateVector,
    est: &Estimator,
) -> Result<f64> {
    check_inputs(template, params, input)?;
    est.validate()?;
    let out = crate::sim::run_circuit(template, params, input)?;
    Ok(est.read(&out, template.readout_qubit(), shot_keys(0, FORWARD_KEY, 0)))
}

/// Shift-rule derivative of the raw readout expectation `<Z>` with respect
/// to one slot. In shots mode the two shifted terms use independent draws.
pub fn shift_grad(
    template: &CircuitTemplate,
    params: &ParameterStore,
    slot: usize,
    input: &StateVector,
    est: &Estimator,
) -> Result<f64> {
    check_inputs(template, params, input)?;
    est.validate()?;
    if slot >= params.len() {
        return Err(Error::usage(format!(
            "slot {slot} out of range ({} slots)",
            params.len()
        )));
    }
    let traj = Trajectory::new(template, params.values(), input)?;
    Ok(traj.shift_grad(template, params.values(), slot, est, 0))
}

/// Central finite difference of the exact readout expectation.
pub fn fd_grad(
    template: &CircuitTemplate,
    params: &ParameterStore,
    slot: usize,
    input: &StateVector,
    h: f64,
) -> Result<f64> {
    check_inputs(template, params, input)?;
    if h.is_nan() || h <= 0.0 {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    if slot >= params.len() {
        return Err(Error::usage(format!("slot {slot} out of range")));
    }
    let eval = |delta: f64| -> Result<f64> {
        let mut p = params.clone();
        p.values_mut()[slot] += delta;
        let out = crate::sim::run_circuit(template, &p, input)?;
        Ok(out.z_exact(template.readout_qubit()))
    };
    Ok((eval(h)? - eval(-h)?) / (2.0 * h))
}

/// One encoded training example: the state after the data layer, and its
/// binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub state: StateVector,
    pub label: u8,
}

/// Model output in `[0, 1]` from a readout expectation.
#[inline]
pub fn rescale(z: f64) -> f64 {
    0.5 * (1.0 + z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    /// Mean loss gradient, one entry per trainable slot in the given order.
    pub grads: Vec<f64>,
    /// Mean cross entropy of the forward values used for the chain rule.
    pub loss: f64,
    /// `2 · n_p · m · b` shift-rule measurements.
    pub gradient_measurements: u64,
    /// `m · b` forward-pass measurements, tracked separately.
    pub forward_measurements: u64,
}

/// Mean cross-entropy gradient over `batch` for the `trainable` slots.
///
/// Per sample: one forward evaluation gives `E = (1 + <Z>)/2`, clipped away
/// from 0 and 1; each trainable slot then gets `dL/dE · dE/dθ` where
/// `dE/dθ` is half the shift-rule derivative of `<Z>`. Frozen slots are
/// never evaluated. In exact mode the shift-rule values are obtained from a
/// single reverse sweep instead of `2 · n_p` shifted circuits; the ledger
/// still charges the shift-rule count.
pub fn batch_loss_grad(
    template: &CircuitTemplate,
    params: &ParameterStore,
    trainable: &[usize],
    batch: &[LabeledInput],
    est: &Estimator,
    exec: Exec,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::usage("batch is empty"));
    }
    if trainable.is_empty() {
        return Err(Error::usage("no trainable slots"));
    }
    est.validate()?;
    if let Some(&bad) = trainable.iter().find(|&&s| s >= params.len()) {
        return Err(Error::usage(format!("trainable slot {bad} out of range")));
    }
    for sample in batch {
        check_inputs(template, params, &sample.state)?;
    }

    let angles = params.values();
    let q = template.readout_qubit();
    let first_layer = trainable.iter().map(|&s| template.layer_of_slot(s)).min().unwrap_or(0);
    let per_sample = exec.try_map(batch.len(), |i| -> Result<(f64, Vec<f64>)> {
        let sample = &batch[i];
        let y = f64::from(sample.label);
        if let Estimator::Exact = est {
            let (z, dz) = adjoint_sweep(template, angles, &sample.state, first_layer)?;
            let e = clip_probability(rescale(z));
            let dl_de = bce_loss_grad(e, y);
            let grads = trainable.iter().map(|&slot| dl_de * 0.5 * dz[slot]).collect();
            return Ok((bce_loss(e, y), grads));
        }
        // f(θ ± π/2) = (f(θ) + f(θ + π))/2 ± f'(θ)
        let traj = Trajectory::new(template, angles, &sample.state)?;
        let (z, dz) = reverse_sweep(template, angles, traj.output.clone(), first_layer);
        let e = clip_probability(rescale(est.read_value(z, shot_keys(i as u64, FORWARD_KEY, 0))));
        let dl_de = bce_loss_grad(e, y);
        let grads = trainable
            .iter()
            .map(|&slot| {
                let opposite = traj.shifted(template, angles, slot, PI).z_exact(q);
                let mid = 0.5 * (z + opposite);
                let plus = (mid + dz[slot]).clamp(-1.0, 1.0);
                let minus = (mid - dz[slot]).clamp(-1.0, 1.0);
                let plus = est.read_value(plus, shot_keys(i as u64, slot as u64, 0));
                let minus = est.read_value(minus, shot_keys(i as u64, slot as u64, 1));
                dl_de * 0.5 * SHIFT_PREFACTOR * (plus - minus)
            })
            .collect();
        Ok((bce_loss(e, y), grads))
    })?;

    let b = batch.len() as f64;
    let mut grads = vec![0.0; trainable.len()];
    let mut loss = 0.0;
    for (l, g) in &per_sample {
        loss += l;
        grads.iter_mut().zip(g).for_each(|(acc, v)| *acc += v);
    }
    grads.iter_mut().for_each(|g| *g /= b);

    let m = est.shots_per_expectation();
    let b = batch.len() as u64;
    Ok(BatchGradient {
        grads,
        loss: loss / b as f64,
        gradient_measurements: 2 * trainable.len() as u64 * m * b,
        forward_measurements: m * b,
    })
}
