//! Reference implementations used as oracles by the integration tests.
//! Everything here is written the slow, obvious way.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use qimagegen::statevector::{Axis, Gate};

pub const I: Complex64 = Complex64::new(0.0, 1.0);

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn bit(index: usize, n: usize, qubit: usize) -> usize {
    (index >> (n - 1 - qubit)) & 1
}

pub fn one_qubit_matrix(axis: Axis, angle: f64) -> [[Complex64; 2]; 2] {
    let (co, si) = ((angle / 2.0).cos(), (angle / 2.0).sin());
    match axis {
        Axis::X => [[c(co), -I * si], [-I * si, c(co)]],
        Axis::Y => [[c(co), c(-si)], [c(si), c(co)]],
        Axis::Z => [
            [(-I * angle / 2.0).exp(), c(0.0)],
            [c(0.0), (I * angle / 2.0).exp()],
        ],
    }
}

/// Full `2ⁿ×2ⁿ` matrix of a gate, built column by column.
pub fn dense_gate(gate: Gate, n: usize) -> DMatrix<Complex64> {
    let dim = 1 << n;
    let mut m = DMatrix::zeros(dim, dim);
    let single = |q: usize, u: [[Complex64; 2]; 2], m: &mut DMatrix<Complex64>, only_if: Option<usize>| {
        for col in 0..dim {
            if let Some(ctrl) = only_if {
                if bit(col, n, ctrl) == 0 {
                    m[(col, col)] = c(1.0);
                    continue;
                }
            }
            let b = bit(col, n, q);
            let mask = 1 << (n - 1 - q);
            for out in 0..2 {
                let row = (col & !mask) | (out * mask);
                m[(row, col)] += u[out][b];
            }
        }
    };
    match gate {
        Gate::H(q) => return dense_h(q, n),
        Gate::Rot { axis, qubit, angle } => single(qubit, one_qubit_matrix(axis, angle), &mut m, None),
        Gate::CRot {
            axis,
            control,
            target,
            angle,
        } => single(target, one_qubit_matrix(axis, angle), &mut m, Some(control)),
        Gate::Cnot { control, target } => {
            let x = [[c(0.0), c(1.0)], [c(1.0), c(0.0)]];
            single(target, x, &mut m, Some(control));
        }
    }
    m
}

pub fn dense_h(qubit: usize, n: usize) -> DMatrix<Complex64> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let dim = 1 << n;
    let mask = 1 << (n - 1 - qubit);
    let mut m = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let b = bit(col, n, qubit);
        m[(col & !mask, col)] += c(h);
        m[(col | mask, col)] += c(if b == 1 { -h } else { h });
    }
    m
}

/// Applies a gate list to `|0…0⟩` by dense matrix products.
pub fn dense_run(gates: impl IntoIterator<Item = Gate>, n: usize) -> Vec<Complex64> {
    let mut psi = zero_state(n);
    for g in gates {
        psi = dense_gate(g, n) * psi;
    }
    psi.iter().copied().collect()
}

pub fn zero_state(n: usize) -> DVector<Complex64> {
    let mut v = DVector::zeros(1 << n);
    v[0] = c(1.0);
    v
}

/// Reduced density matrix by explicit summation over the complement.
/// The first listed qubit is the most significant bit of the row index.
pub fn partial_trace(psi: &[Complex64], n: usize, keep: &[usize]) -> DMatrix<Complex64> {
    let k = keep.len();
    let mut rho = DMatrix::zeros(1 << k, 1 << k);
    let sub = |idx: usize| keep.iter().fold(0, |acc, &q| (acc << 1) | bit(idx, n, q));
    let rest = |idx: usize| {
        (0..n)
            .filter(|q| !keep.contains(q))
            .fold(0, |acc, q| (acc << 1) | bit(idx, n, q))
    };
    for a in 0..psi.len() {
        for b in 0..psi.len() {
            if rest(a) == rest(b) {
                rho[(sub(a), sub(b))] += psi[a] * psi[b].conj();
            }
        }
    }
    rho
}

/// Von Neumann entropy (bits) through the real symmetric embedding
/// `[[Re, −Im], [Im, Re]]`, whose spectrum is that of ρ with each value doubled.
pub fn brute_entropy(rho: &DMatrix<Complex64>) -> f64 {
    let d = rho.nrows();
    let mut real = DMatrix::<f64>::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            let z = rho[(i, j)];
            real[(i, j)] = z.re;
            real[(i + d, j + d)] = z.re;
            real[(i, j + d)] = -z.im;
            real[(i + d, j)] = z.im;
        }
    }
    let eig = real.symmetric_eigen().eigenvalues;
    -0.5 * eig
        .iter()
        .filter(|&&l| l > 1e-14)
        .map(|&l| l * l.log2())
        .sum::<f64>()
}

/// Central finite difference of `f` at `x` along every coordinate.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Naive double-loop biased MMD² with kernel `k`.
pub fn brute_mmd(x: &[Vec<f64>], y: &[Vec<f64>], k: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut xx = 0.0;
    for a in x {
        for b in x {
            xx += k(a, b);
        }
    }
    let mut yy = 0.0;
    for a in y {
        for b in y {
            yy += k(a, b);
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k(a, b);
        }
    }
    let (m, n) = (x.len() as f64, y.len() as f64);
    xx / (m * m) + yy / (n * n) - 2.0 * xy / (m * n)
}
