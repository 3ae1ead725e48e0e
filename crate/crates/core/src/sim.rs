//! Dense statevector simulation.
//!
//! Amplitudes are stored in a flat array of length `2^n`. Qubit 0 is the most
//! significant bit of the basis index, so `|q0 q1 ... q(n-1)>` maps to the
//! index `q0·2^(n-1) + ... + q(n-1)`.
//!
//! Rotations use the half-angle convention `R_P(θ) = exp(-i·θ/2·P)`, under
//! which the two-term parameter-shift rule with shift `π/2` and prefactor
//! `1/2` is exact.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::circuits::CircuitTemplate;
use crate::error::{Error, Result};
use crate::training::ParameterStore;

/// Largest register the dense simulator accepts.
pub const MAX_QUBITS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gate", rename_all = "snake_case")]
pub enum GateOp {
    Rotation { axis: Axis, qubit: usize, angle: f64 },
    Cz { a: usize, b: usize },
    Hadamard { qubit: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// `|0...0>` on `n_qubits` qubits.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        Self::basis(n_qubits, 0)
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        if n_qubits > MAX_QUBITS {
            return Err(Error::usage(format!(
                "{n_qubits} qubits exceeds the dense simulator limit of {MAX_QUBITS}"
            )));
        }
        let dim = 1usize << n_qubits;
        if index >= dim {
            return Err(Error::usage(format!(
                "basis index {index} out of range for {n_qubits} qubits"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); dim];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(Self { n_qubits, amplitudes })
    }

    /// Wraps raw amplitudes. The length must be a power of two; the caller is
    /// responsible for normalization.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let dim = amplitudes.len();
        if dim == 0 || !dim.is_power_of_two() {
            return Err(Error::usage(format!("amplitude count {dim} is not a power of two")));
        }
        Ok(Self {
            n_qubits: dim.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `|<self|other>|^2`.
    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            .norm_sqr()
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.n_qubits {
            return Err(Error::usage(format!(
                "qubit {qubit} out of range for a {}-qubit state",
                self.n_qubits
            )));
        }
        Ok(())
    }

    #[inline]
    fn stride(&self, qubit: usize) -> usize {
        1 << (self.n_qubits - 1 - qubit)
    }

    /// Applies the 2×2 matrix `[[m00, m01], [m10, m11]]` to `qubit`.
    #[inline]
    fn apply_single(&mut self, qubit: usize, m00: Complex64, m01: Complex64, m10: Complex64, m11: Complex64) {
        let stride = self.stride(qubit);
        for block in self.amplitudes.chunks_exact_mut(2 * stride) {
            let (lo, hi) = block.split_at_mut(stride);
            for (a0, a1) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a0, *a1);
                *a0 = m00 * x + m01 * y;
                *a1 = m10 * x + m11 * y;
            }
        }
    }

    /// `exp(-i·angle/2·P)` on `qubit`.
    pub fn apply_rotation(&mut self, qubit: usize, axis: Axis, angle: f64) -> Result<()> {
        self.check_qubit(qubit)?;
        self.rotate(qubit, axis, angle);
        Ok(())
    }

    pub(crate) fn rotate(&mut self, qubit: usize, axis: Axis, angle: f64) {
        let (s, c) = (0.5 * angle).sin_cos();
        let stride = self.stride(qubit);
        match axis {
            Axis::X => {
                let ms = Complex64::new(0.0, -s);
                let mc = Complex64::new(c, 0.0);
                self.apply_single(qubit, mc, ms, ms, mc);
            }
            Axis::Y => {
                for block in self.amplitudes.chunks_exact_mut(2 * stride) {
                    let (lo, hi) = block.split_at_mut(stride);
                    for (a0, a1) in lo.iter_mut().zip(hi.iter_mut()) {
                        let (x, y) = (*a0, *a1);
                        *a0 = x * c - y * s;
                        *a1 = x * s + y * c;
                    }
                }
            }
            Axis::Z => {
                let p0 = Complex64::new(c, -s);
                let p1 = Complex64::new(c, s);
                for block in self.amplitudes.chunks_exact_mut(2 * stride) {
                    let (lo, hi) = block.split_at_mut(stride);
                    lo.iter_mut().for_each(|a| *a *= p0);
                    hi.iter_mut().for_each(|a| *a *= p1);
                }
            }
        }
    }

    pub fn apply_cz(&mut self, a: usize, b: usize) -> Result<()> {
        self.check_qubit(a)?;
        self.check_qubit(b)?;
        if a == b {
            return Err(Error::usage(format!("cz needs two distinct qubits, got {a} twice")));
        }
        let mask = self.stride(a) | self.stride(b);
        for (i, amp) in self.amplitudes.iter_mut().enumerate() {
            if i & mask == mask {
                *amp = -*amp;
            }
        }
        Ok(())
    }

    /// Negates every amplitude whose flag is set. Used for precomputed CZ
    /// layers, which are diagonal in the computational basis.
    pub(crate) fn apply_sign_flips(&mut self, flips: &[bool]) {
        debug_assert_eq!(flips.len(), self.amplitudes.len());
        for (amp, &flip) in self.amplitudes.iter_mut().zip(flips) {
            if flip {
                *amp = -*amp;
            }
        }
    }

    /// Pauli Z on `qubit`.
    pub(crate) fn apply_z(&mut self, qubit: usize) {
        let stride = self.stride(qubit);
        for block in self.amplitudes.chunks_exact_mut(2 * stride) {
            block[stride..].iter_mut().for_each(|a| *a = -*a);
        }
    }

    /// `Im <self| P_qubit |phi>`.
    pub(crate) fn pauli_overlap_im(&self, phi: &StateVector, qubit: usize, axis: Axis) -> f64 {
        let stride = self.stride(qubit);
        let mut acc = Complex64::new(0.0, 0.0);
        for (l, p) in self
            .amplitudes
            .chunks_exact(2 * stride)
            .zip(phi.amplitudes.chunks_exact(2 * stride))
        {
            let (l0, l1) = l.split_at(stride);
            let (p0, p1) = p.split_at(stride);
            for i in 0..stride {
                acc += match axis {
                    Axis::X => l0[i].conj() * p1[i] + l1[i].conj() * p0[i],
                    Axis::Y => Complex64::i() * (l1[i].conj() * p0[i] - l0[i].conj() * p1[i]),
                    Axis::Z => l0[i].conj() * p0[i] - l1[i].conj() * p1[i],
                };
            }
        }
        acc.im
    }

    pub fn apply_hadamard(&mut self, qubit: usize) -> Result<()> {
        self.check_qubit(qubit)?;
        let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        self.apply_single(qubit, h, h, h, -h);
        Ok(())
    }

    pub fn apply(&mut self, op: &GateOp) -> Result<()> {
        match *op {
            GateOp::Rotation { axis, qubit, angle } => self.apply_rotation(qubit, axis, angle),
            GateOp::Cz { a, b } => self.apply_cz(a, b),
            GateOp::Hadamard { qubit } => self.apply_hadamard(qubit),
        }
    }

    /// Probability that `qubit` reads 0.
    fn prob_zero(&self, qubit: usize) -> f64 {
        let stride = self.stride(qubit);
        self.amplitudes
            .chunks_exact(2 * stride)
            .flat_map(|block| &block[..stride])
            .map(|a| a.norm_sqr())
            .sum()
    }

    /// Exact `<Z_qubit>`.
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        Ok(self.z_exact(qubit))
    }

    pub(crate) fn z_exact(&self, qubit: usize) -> f64 {
        let p0 = self.prob_zero(qubit);
        let total: f64 = self.amplitudes.iter().map(|a| a.norm_sqr()).sum();
        (2.0 * p0 - total).clamp(-1.0, 1.0)
    }

    /// Estimates `<Z_qubit>` from `shots` projective measurements: the number
    /// of `0` outcomes is drawn from `Binomial(shots, (1 + <Z>)/2)`.
    pub fn sample_expectation_z<R: Rng + ?Sized>(&self, qubit: usize, shots: u32, rng: &mut R) -> Result<f64> {
        self.check_qubit(qubit)?;
        if shots == 0 {
            return Err(Error::usage("shot count must be at least 1"));
        }
        Ok(sample_z(self.z_exact(qubit), shots, rng))
    }
}

/// Draws an m-shot estimate of a Z expectation whose exact value is `z`.
pub(crate) fn sample_z<R: Rng + ?Sized>(z: f64, shots: u32, rng: &mut R) -> f64 {
    let p = (0.5 * (1.0 + z)).clamp(0.0, 1.0);
    let zeros = Binomial::new(u64::from(shots), p)
        .expect("probability clamped to [0, 1]")
        .sample(rng);
    2.0 * zeros as f64 / f64::from(shots) - 1.0
}

/// Runs the template's prefix and all of its layers on `input`.
pub fn run_circuit(template: &CircuitTemplate, params: &ParameterStore, input: &StateVector) -> Result<StateVector> {
    if params.len() != template.n_params() {
        return Err(Error::usage(format!(
            "template has {} parameter slots but {} values were supplied",
            template.n_params(),
            params.len()
        )));
    }
    if input.n_qubits() != template.n_qubits() {
        return Err(Error::usage(format!(
            "input has {} qubits, template expects {}",
            input.n_qubits(),
            template.n_qubits()
        )));
    }
    let mut state = input.clone();
    template.prefix().apply(&mut state)?;
    template.apply_layers(&mut state, params.values(), 0..template.n_layers());
    Ok(state)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_3, PI};

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_state(n: usize, seed: u64) -> StateVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut amps: Vec<Complex64> = (0..1 << n)
            .map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= norm);
        StateVector::from_amplitudes(amps).unwrap()
    }

    fn assert_states_eq(a: &StateVector, b: &StateVector, tol: f64) {
        for (x, y) in a.amplitudes().iter().zip(b.amplitudes()) {
            assert!((x - y).norm() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn rx_pi_flips() {
        let mut s = StateVector::zero(1).unwrap();
        s.apply_rotation(0, Axis::X, PI).unwrap();
        assert_abs_diff_eq!(s.expectation_z(0).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn rz_leaves_z_readout() {
        for theta in [0.0, 0.3, 2.0, -5.0] {
            let mut s = StateVector::zero(1).unwrap();
            s.apply_rotation(0, Axis::Z, theta).unwrap();
            assert_abs_diff_eq!(s.expectation_z(0).unwrap(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rx_expectation_is_cosine() {
        for theta in [0.0, FRAC_PI_3, FRAC_PI_2] {
            let mut s = StateVector::zero(1).unwrap();
            s.apply_rotation(0, Axis::X, theta).unwrap();
            assert_abs_diff_eq!(s.expectation_z(0).unwrap(), theta.cos(), epsilon = 1e-12);
        }
    }

    #[test]
    fn rotation_rejects_bad_qubit() {
        let mut s = StateVector::zero(2).unwrap();
        assert!(matches!(s.apply_rotation(2, Axis::X, 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn cz_cases() {
        let mut s = StateVector::zero(2).unwrap();
        s.apply_cz(0, 1).unwrap();
        assert_eq!(s, StateVector::zero(2).unwrap());

        let h = FRAC_1_SQRT_2;
        let zero = c(0.0, 0.0);
        let mut s = StateVector::from_amplitudes(vec![zero, c(h, 0.0), zero, c(h, 0.0)]).unwrap();
        s.apply_cz(0, 1).unwrap();
        assert_eq!(s.amplitudes(), &[zero, c(h, 0.0), zero, c(-h, 0.0)]);

        let orig = random_state(3, 1);
        let mut s = orig.clone();
        s.apply_cz(0, 2).unwrap();
        s.apply_cz(0, 2).unwrap();
        assert_eq!(s, orig);

        assert!(s.apply_cz(1, 1).is_err());
    }

    #[test]
    fn hadamard_cases() {
        let mut s = StateVector::zero(1).unwrap();
        s.apply_hadamard(0).unwrap();
        assert_abs_diff_eq!(s.expectation_z(0).unwrap(), 0.0, epsilon = 1e-15);

        let orig = random_state(3, 2);
        let mut s = orig.clone();
        s.apply_hadamard(1).unwrap();
        s.apply_hadamard(1).unwrap();
        assert_states_eq(&s, &orig, 1e-14);

        let mut s = StateVector::basis(1, 1).unwrap();
        s.apply_hadamard(0).unwrap();
        assert_states_eq(
            &s,
            &StateVector::from_amplitudes(vec![c(FRAC_1_SQRT_2, 0.0), c(-FRAC_1_SQRT_2, 0.0)]).unwrap(),
            1e-15,
        );
        assert!(s.apply_hadamard(1).is_err());
    }

    #[test]
    fn zero_state_expectations() {
        let s = StateVector::zero(4).unwrap();
        for q in 0..4 {
            assert_eq!(s.expectation_z(q).unwrap(), 1.0);
        }
        assert!(s.expectation_z(4).is_err());
    }

    #[test]
    fn qubit_zero_is_most_significant() {
        let mut s = StateVector::zero(3).unwrap();
        s.apply_rotation(0, Axis::X, PI).unwrap();
        assert!(s.amplitudes()[0b100].norm() > 0.999);
    }

    #[test]
    fn sampling_degenerate_and_errors() {
        let s = StateVector::zero(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [1, 7, 1000] {
            assert_eq!(s.sample_expectation_z(1, m, &mut rng).unwrap(), 1.0);
        }
        assert!(s.sample_expectation_z(1, 0, &mut rng).is_err());
    }

    #[test]
    fn sampling_mean_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 100_000;
        // <Z> = 0, m = 10: estimates on the grid {-1, -0.8, ..., 1}.
        let draws: Vec<f64> = (0..reps).map(|_| sample_z(0.0, 10, &mut rng)).collect();
        for d in &draws {
            let k = (d + 1.0) * 5.0;
            assert!((k - k.round()).abs() < 1e-9);
        }
        let mean = draws.iter().sum::<f64>() / reps as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");

        // <Z> = 0.5: variance (1 - 0.25) / 10.
        let draws: Vec<f64> = (0..reps).map(|_| sample_z(0.5, 10, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let expected = 0.75 / 10.0;
        assert!((var - expected).abs() / expected < 0.1, "var {var}");
    }

    #[test]
    fn sampling_converges_to_exact() {
        let mut s = StateVector::zero(2).unwrap();
        s.apply_rotation(1, Axis::Y, 1.1).unwrap();
        let exact = s.expectation_z(1).unwrap();
        let mut fails = 0;
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est = s.sample_expectation_z(1, 1_000_000, &mut rng).unwrap();
            if (est - exact).abs() >= 5e-3 {
                fails += 1;
            }
        }
        assert!(fails <= 2, "{fails} of 200 seeds missed");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut s = StateVector::zero(1).unwrap();
        s.apply_rotation(0, Axis::X, 1.0).unwrap();
        let a = s
            .sample_expectation_z(0, 10, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = s
            .sample_expectation_z(0, 10, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    fn gate_strategy(n: usize) -> impl Strategy<Value = GateOp> {
        prop_oneof![
            (0..3usize, 0..n, -10.0..10.0f64).prop_map(|(a, qubit, angle)| GateOp::Rotation {
                axis: Axis::ALL[a],
                qubit,
                angle
            }),
            (0..n, 1..n).prop_map(move |(a, d)| GateOp::Cz { a, b: (a + d) % n }),
            (0..n).prop_map(|qubit| GateOp::Hadamard { qubit }),
        ]
    }

    proptest! {
        #[test]
        fn norm_is_preserved(gates in prop::collection::vec(gate_strategy(4), 0..60)) {
            let mut s = StateVector::zero(4).unwrap();
            for g in &gates {
                s.apply(g).unwrap();
            }
            prop_assert!((s.norm() - 1.0).abs() < 1e-10);
        }

        #[test]
        fn rotation_has_period_four_pi(a in 0..3usize, q in 0..3usize, angle in -10.0..10.0f64, seed in 0..1000u64) {
            let base = random_state(3, seed);
            let mut s1 = base.clone();
            let mut s2 = base;
            s1.apply_rotation(q, Axis::ALL[a], angle).unwrap();
            s2.apply_rotation(q, Axis::ALL[a], angle + 4.0 * PI).unwrap();
            for (x, y) in s1.amplitudes().iter().zip(s2.amplitudes()) {
                prop_assert!((x - y).norm() < 1e-12);
            }
        }

        #[test]
        fn cz_order_within_layer_is_irrelevant(seed in 0..1000u64, perm_seed in 0..1000u64) {
            use rand::seq::SliceRandom;
            let n = 4;
            let base = random_state(n, seed);
            let mut pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            let mut s1 = base.clone();
            for &(a, b) in &pairs {
                s1.apply_cz(a, b).unwrap();
            }
            pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let mut s2 = base;
            for &(a, b) in &pairs {
                s2.apply_cz(b, a).unwrap();
            }
            for (x, y) in s1.amplitudes().iter().zip(s2.amplitudes()) {
                prop_assert!((x - y).norm() < 1e-12);
            }
        }
    }
}
