//! Layered random circuit templates.
//!
//! A layer is one rotation per qubit about a random Pauli axis followed by a
//! fixed set of CZ gates. Layer `k` of an `n`-qubit template owns parameter
//! slots `k·n .. (k+1)·n`, one per qubit in qubit order.

use std::f64::consts::TAU;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::sim::{Axis, StateVector};

/// Every unordered qubit pair `(i, j)` with `i < j`.
pub fn all_to_all_entangler(n_qubits: usize) -> Result<Vec<(usize, usize)>> {
    if n_qubits < 2 {
        return Err(Error::usage(format!(
            "an entangler needs at least 2 qubits, got {n_qubits}"
        )));
    }
    Ok((0..n_qubits)
        .flat_map(|i| (i + 1..n_qubits).map(move |j| (i, j)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rotation {
    pub qubit: usize,
    pub axis: Axis,
    pub slot: usize,
}

/// A set of CZ gates. They commute, so the whole set acts as one diagonal
/// sign pattern which is built on first use.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Entangler {
    pairs: Vec<(usize, usize)>,
    #[serde(skip)]
    flips: OnceLock<Vec<bool>>,
}

impl PartialEq for Entangler {
    fn eq(&self, other: &Self) -> bool {
        self.pairs == other.pairs
    }
}

impl Entangler {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self {
            pairs,
            flips: OnceLock::new(),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    fn validate(&self, n_qubits: usize) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &self.pairs {
            if a >= n_qubits || b >= n_qubits || a == b {
                return Err(Error::usage(format!("invalid cz pair ({a}, {b})")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::usage(format!("duplicate cz pair ({a}, {b})")));
            }
        }
        Ok(())
    }

    pub(crate) fn apply(&self, state: &mut StateVector) {
        if self.pairs.is_empty() {
            return;
        }
        let n = state.n_qubits();
        let flips = self.flips.get_or_init(|| {
            let masks: Vec<usize> = self
                .pairs
                .iter()
                .map(|&(a, b)| (1 << (n - 1 - a)) | (1 << (n - 1 - b)))
                .collect();
            (0..1usize << n)
                .map(|i| masks.iter().filter(|&&m| i & m == m).count() % 2 == 1)
                .collect()
        });
        state.apply_sign_flips(flips);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rotations: Vec<Rotation>,
    pub entangler: Entangler,
}

impl Layer {
    pub fn has_x(&self) -> bool {
        self.rotations.iter().any(|r| r.axis == Axis::X)
    }
}

/// Draws one layer whose rotation slots start at `first_slot`. Each axis is
/// uniform over {X, Y, Z}; the entangler couples every pair of qubits.
pub fn random_layer<R: Rng + ?Sized>(n_qubits: usize, first_slot: usize, rng: &mut R) -> Layer {
    let rotations = (0..n_qubits)
        .map(|qubit| Rotation {
            qubit,
            axis: Axis::ALL[rng.random_range(0..3)],
            slot: first_slot + qubit,
        })
        .collect();
    let pairs = all_to_all_entangler(n_qubits).unwrap_or_default();
    Layer {
        rotations,
        entangler: Entangler::new(pairs),
    }
}

/// Makes sure the block contains at least one X rotation by reassigning a
/// uniformly chosen slot when none is present. Returns whether it changed
/// anything.
pub fn enforce_x_in_block<R: Rng + ?Sized>(layers: &mut [Layer], rng: &mut R) -> Result<bool> {
    let total: usize = layers.iter().map(|l| l.rotations.len()).sum();
    if total == 0 {
        return Err(Error::usage("cannot enforce an X gate in an empty block"));
    }
    if layers.iter().any(Layer::has_x) {
        return Ok(false);
    }
    let mut pick = rng.random_range(0..total);
    for layer in layers.iter_mut() {
        if pick < layer.rotations.len() {
            layer.rotations[pick].axis = Axis::X;
            return Ok(true);
        }
        pick -= layer.rotations.len();
    }
    unreachable!("pick < total")
}

/// Gates applied ahead of the trainable layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prefix {
    #[default]
    None,
    HadamardWall,
    /// `exp(-i·d_q·X_q)` on every qubit. The angles are the encoded features
    /// and are never differentiated. Note the full-angle form: this is
    /// `R_X(2·d_q)` in the rotation convention used elsewhere.
    DataLayer {
        angles: Vec<f64>,
    },
}

impl Prefix {
    pub fn apply(&self, state: &mut StateVector) -> Result<()> {
        match self {
            Prefix::None => Ok(()),
            Prefix::HadamardWall => (0..state.n_qubits()).try_for_each(|q| state.apply_hadamard(q)),
            Prefix::DataLayer { angles } => {
                if angles.len() != state.n_qubits() {
                    return Err(Error::usage(format!(
                        "data layer has {} angles for {} qubits",
                        angles.len(),
                        state.n_qubits()
                    )));
                }
                angles
                    .iter()
                    .enumerate()
                    .try_for_each(|(q, &d)| state.apply_rotation(q, Axis::X, 2.0 * d))
            }
        }
    }
}

/// Builds the data-encoding prefix for one sample.
pub fn data_layer(n_qubits: usize, features: &[f64]) -> Result<Prefix> {
    if features.len() != n_qubits {
        return Err(Error::usage(format!(
            "expected {n_qubits} features, got {}",
            features.len()
        )));
    }
    Ok(Prefix::DataLayer {
        angles: features.to_vec(),
    })
}

/// `|0...0>` with the sample's data layer applied.
pub fn encode_input(features: &[f64]) -> Result<StateVector> {
    let mut state = StateVector::zero(features.len())?;
    data_layer(features.len(), features)?.apply(&mut state)?;
    Ok(state)
}

/// How scaled features become data-layer angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataEncoding {
    /// `exp(-i·d·X)`: features one period apart in `[0, 2π)` collide, since
    /// `d` and `d + π` give the same state up to a global phase.
    FullAngle,
    /// `exp(-i·(d/2)·X)`: one feature period maps onto one rotation period.
    #[default]
    HalfAngle,
}

impl DataEncoding {
    pub fn encode(self, features: &[f64]) -> Result<StateVector> {
        match self {
            DataEncoding::FullAngle => encode_input(features),
            DataEncoding::HalfAngle => {
                let half: Vec<f64> = features.iter().map(|d| 0.5 * d).collect();
                encode_input(&half)
            }
        }
    }
}

/// Per-layer random streams. Layer `k` is always drawn from the same stream,
/// so a template grown in steps matches one built in a single call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStreams {
    pub seed: u64,
}

impl LayerStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn layer(&self, index: usize) -> rng::StreamRng {
        rng::stream(self.seed, &[domain::LAYER, index as u64])
    }

    /// Stream for the X-enforcement draw of the block starting at `first_layer`.
    pub fn x_enforcement(&self, first_layer: usize) -> rng::StreamRng {
        rng::stream(self.seed, &[domain::X_ENFORCE, first_layer as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitTemplate {
    n_qubits: usize,
    prefix: Prefix,
    layers: Vec<Layer>,
    readout_qubit: usize,
}

impl CircuitTemplate {
    /// An empty template reading out the last qubit.
    pub fn new(n_qubits: usize, prefix: Prefix) -> Result<Self> {
        if n_qubits == 0 || n_qubits > crate::sim::MAX_QUBITS {
            return Err(Error::usage(format!("unsupported qubit count {n_qubits}")));
        }
        Ok(Self {
            n_qubits,
            prefix,
            layers: Vec::new(),
            readout_qubit: n_qubits - 1,
        })
    }

    /// `n_layers` random layers drawn from `streams`.
    pub fn random(n_qubits: usize, n_layers: usize, prefix: Prefix, streams: &LayerStreams) -> Result<Self> {
        let mut t = Self::new(n_qubits, prefix)?;
        t.grow(n_layers, streams)?;
        Ok(t)
    }

    pub fn with_readout(mut self, qubit: usize) -> Result<Self> {
        if qubit >= self.n_qubits {
            return Err(Error::usage(format!("readout qubit {qubit} out of range")));
        }
        self.readout_qubit = qubit;
        Ok(self)
    }

    pub fn with_prefix(mut self, prefix: Prefix) -> Self {
        self.prefix = prefix;
        self
    }

    /// Appends `p` random layers. Existing layers and slots are untouched.
    pub fn grow(&mut self, p: usize, streams: &LayerStreams) -> Result<()> {
        if p == 0 {
            return Err(Error::usage("grow needs at least one layer"));
        }
        for _ in 0..p {
            let index = self.layers.len();
            let layer = random_layer(self.n_qubits, self.n_params(), &mut streams.layer(index));
            self.layers.push(layer);
        }
        Ok(())
    }

    /// Appends an explicit layer. Slots must continue the existing numbering.
    pub fn push_layer(&mut self, layer: Layer) -> Result<()> {
        let first = self.n_params();
        if layer.rotations.len() != self.n_qubits {
            return Err(Error::usage("a layer needs exactly one rotation per qubit"));
        }
        for (q, r) in layer.rotations.iter().enumerate() {
            if r.qubit != q || r.slot != first + q {
                return Err(Error::usage(format!(
                    "rotation {q} has qubit {} slot {}, expected qubit {q} slot {}",
                    r.qubit,
                    r.slot,
                    first + q
                )));
            }
        }
        layer.entangler.validate(self.n_qubits)?;
        self.layers.push(layer);
        Ok(())
    }

    /// Enforces an X rotation within layers `range`.
    pub fn enforce_x(&mut self, range: Range<usize>, streams: &LayerStreams) -> Result<bool> {
        let start = range.start;
        let block = self
            .layers
            .get_mut(range)
            .ok_or_else(|| Error::usage("layer block out of range"))?;
        enforce_x_in_block(block, &mut streams.x_enforcement(start))
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.len() * self.n_qubits
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn prefix(&self) -> &Prefix {
        &self.prefix
    }

    pub fn readout_qubit(&self) -> usize {
        self.readout_qubit
    }

    pub fn layer_of_slot(&self, slot: usize) -> usize {
        slot / self.n_qubits
    }

    pub fn slots_of_layer(&self, layer: usize) -> Range<usize> {
        layer * self.n_qubits..(layer + 1) * self.n_qubits
    }

    /// Applies one layer, optionally shifting the angle of one of its slots.
    #[inline]
    pub(crate) fn apply_layer(
        &self,
        state: &mut StateVector,
        layer: usize,
        angles: &[f64],
        shift: Option<(usize, f64)>,
    ) {
        let layer = &self.layers[layer];
        for r in &layer.rotations {
            let mut angle = angles[r.slot];
            if let Some((slot, delta)) = shift {
                if slot == r.slot {
                    angle += delta;
                }
            }
            state.rotate(r.qubit, r.axis, angle);
        }
        layer.entangler.apply(state);
    }

    /// Applies layers `range` in order. `angles` is indexed by slot.
    pub fn apply_layers(&self, state: &mut StateVector, angles: &[f64], range: Range<usize>) {
        for k in range {
            self.apply_layer(state, k, angles, None);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.readout_qubit >= self.n_qubits {
            return Err(Error::usage("readout qubit out of range"));
        }
        let mut rebuilt = Self::new(self.n_qubits, self.prefix.clone())?;
        for layer in &self.layers {
            rebuilt.push_layer(layer.clone())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Angles drawn independently from `U(0, 2π)`.
pub fn uniform_angles<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(0.0..TAU)).collect()
}
