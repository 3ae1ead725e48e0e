//! Dense Kronecker-product reference simulator shared by the test targets.
#![allow(dead_code)]

use layerwise::circuits::{CircuitTemplate, Prefix};
use layerwise::sim::Axis;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn pauli(axis: Axis) -> CMat {
    let z = c(0.0, 0.0);
    let one = c(1.0, 0.0);
    match axis {
        Axis::X => CMat::from_row_slice(2, 2, &[z, one, one, z]),
        Axis::Y => CMat::from_row_slice(2, 2, &[z, c(0.0, -1.0), c(0.0, 1.0), z]),
        Axis::Z => CMat::from_row_slice(2, 2, &[one, z, z, -one]),
    }
}

/// `cos(φ)·I − i·sin(φ)·P`.
pub fn exp_pauli(axis: Axis, phi: f64) -> CMat {
    CMat::identity(2, 2) * c(phi.cos(), 0.0) - pauli(axis) * c(0.0, phi.sin())
}

/// `g` on `qubit` of `n`, with qubit 0 as the leftmost Kronecker factor.
pub fn embed(g: &CMat, qubit: usize, n: usize) -> CMat {
    let mut u = CMat::identity(1, 1);
    for q in 0..n {
        let f = if q == qubit { g.clone() } else { CMat::identity(2, 2) };
        u = u.kronecker(&f);
    }
    u
}

pub fn cz(a: usize, b: usize, n: usize) -> CMat {
    let dim = 1 << n;
    let bit = |i: usize, q: usize| (i >> (n - 1 - q)) & 1;
    CMat::from_diagonal(&DVector::from_fn(dim, |i, _| {
        if bit(i, a) == 1 && bit(i, b) == 1 {
            c(-1.0, 0.0)
        } else {
            c(1.0, 0.0)
        }
    }))
}

pub fn hadamard() -> CMat {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    CMat::from_row_slice(2, 2, &[c(h, 0.0), c(h, 0.0), c(h, 0.0), c(-h, 0.0)])
}

/// Full unitary of a template, gate by gate.
pub fn unitary(t: &CircuitTemplate, angles: &[f64]) -> CMat {
    let n = t.n_qubits();
    let mut u = CMat::identity(1 << n, 1 << n);
    match t.prefix() {
        Prefix::None => {}
        Prefix::HadamardWall => {
            for q in 0..n {
                u = embed(&hadamard(), q, n) * u;
            }
        }
        Prefix::DataLayer { angles: d } => {
            for (q, &dq) in d.iter().enumerate() {
                u = embed(&exp_pauli(Axis::X, dq), q, n) * u;
            }
        }
    }
    for layer in t.layers() {
        for r in &layer.rotations {
            u = embed(&exp_pauli(r.axis, 0.5 * angles[r.slot]), r.qubit, n) * u;
        }
        for &(a, b) in layer.entangler.pairs() {
            u = cz(a, b, n) * u;
        }
    }
    u
}

pub fn zero_ket(n: usize) -> DVector<Complex64> {
    let mut v = DVector::from_element(1 << n, c(0.0, 0.0));
    v[0] = c(1.0, 0.0);
    v
}

pub fn fidelity(a: &DVector<Complex64>, b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<Complex64>().norm_sqr()
}
