//! Dense statevector simulation.
//!
//! Qubit `0` is the most significant bit of the basis index. For an FRQI
//! register that puts the color qubit first and the address register in the
//! low bits, so the pixel index of basis state `k` is `k & (2^A - 1)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

pub const MAX_QUBITS: usize = 24;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("qubit {qubit} out of range for a {n}-qubit register")]
    QubitOutOfRange { qubit: usize, n: usize },
    #[error("control and target must differ (both {0})")]
    SameQubit(usize),
    #[error("entangler takes {expected} parameters, got {got}")]
    ParamArity { expected: usize, got: usize },
    #[error("subsystem must be non-empty")]
    EmptySubsystem,
    #[error("qubit {0} listed twice in subsystem")]
    DuplicateQubit(usize),
    #[error("{0} qubits exceeds the simulator limit of {MAX_QUBITS}")]
    TooManyQubits(usize),
    #[error("amplitude vector of length {got} does not match {n} qubits")]
    AmplitudeLength { n: usize, got: usize },
    #[error("malformed statevector file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

/// A single gate of the supported set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    H(usize),
    Rot {
        axis: Axis,
        qubit: usize,
        angle: f64,
    },
    Cnot {
        control: usize,
        target: usize,
    },
    CRot {
        axis: Axis,
        control: usize,
        target: usize,
        angle: f64,
    },
}

impl Gate {
    pub fn inverse(self) -> Gate {
        match self {
            Gate::Rot { axis, qubit, angle } => Gate::Rot {
                axis,
                qubit,
                angle: -angle,
            },
            Gate::CRot {
                axis,
                control,
                target,
                angle,
            } => Gate::CRot {
                axis,
                control,
                target,
                angle: -angle,
            },
            g => g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EntanglerKind {
    /// Nearest neighbours in the ladder.
    N2,
    /// Next-nearest neighbours in the ladder.
    N3,
}

/// Rotation angles consumed by one entangler.
pub const ENTANGLER_PARAMS: usize = 4;

/// Gate sequence of a two-qubit entangler on `(a, b)`:
/// `Ry(θ₀)⊗Ry(θ₁)`, `CNOT(a→b)`, `Ry(θ₂)⊗Ry(θ₃)`, `CNOT(a→b)`.
///
/// Every factor is real, so the composite is an orthogonal 4×4 matrix, and the
/// two CNOTs cancel when all angles are zero.
pub fn entangler_gates(a: usize, b: usize, params: &[f64]) -> Result<[Gate; 6]> {
    if params.len() != ENTANGLER_PARAMS {
        return Err(StateError::ParamArity {
            expected: ENTANGLER_PARAMS,
            got: params.len(),
        });
    }
    if a == b {
        return Err(StateError::SameQubit(a));
    }
    let ry = |qubit, angle| Gate::Rot {
        axis: Axis::Y,
        qubit,
        angle,
    };
    let cx = Gate::Cnot {
        control: a,
        target: b,
    };
    Ok([
        ry(a, params[0]),
        ry(b, params[1]),
        cx,
        ry(a, params[2]),
        ry(b, params[3]),
        cx,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    n: usize,
    amps: Vec<Complex64>,
}

impl QuantumState {
    pub fn zero(n: usize) -> Result<Self> {
        if n > MAX_QUBITS {
            return Err(StateError::TooManyQubits(n));
        }
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
        amps[0] = Complex64::new(1.0, 0.0);
        Ok(Self { n, amps })
    }

    pub fn from_amplitudes(n: usize, amps: Vec<Complex64>) -> Result<Self> {
        if n > MAX_QUBITS {
            return Err(StateError::TooManyQubits(n));
        }
        if amps.len() != 1 << n {
            return Err(StateError::AmplitudeLength { n, got: amps.len() });
        }
        Ok(Self { n, amps })
    }

    /// Real amplitudes, convenient for encoders.
    pub fn from_real(n: usize, amps: &[f64]) -> Result<Self> {
        Self::from_amplitudes(n, amps.iter().map(|&a| Complex64::new(a, 0.0)).collect())
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amps
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `⟨self|other⟩`.
    pub fn inner(&self, other: &QuantumState) -> Complex64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    fn mask(&self, qubit: usize) -> Result<usize> {
        if qubit >= self.n {
            return Err(StateError::QubitOutOfRange { qubit, n: self.n });
        }
        Ok(1 << (self.n - 1 - qubit))
    }

    pub fn apply(&mut self, gate: Gate) -> Result<()> {
        match gate {
            Gate::H(q) => {
                let m = self.mask(q)?;
                let s = std::f64::consts::FRAC_1_SQRT_2;
                self.apply_1q(m, 0, [[s.into(), s.into()], [s.into(), (-s).into()]]);
            }
            Gate::Rot { axis, qubit, angle } => {
                let m = self.mask(qubit)?;
                self.apply_1q(m, 0, rotation_matrix(axis, angle));
            }
            Gate::Cnot { control, target } => {
                let (c, t) = self.pair(control, target)?;
                for k in 0..self.amps.len() {
                    if k & c != 0 && k & t == 0 {
                        self.amps.swap(k, k | t);
                    }
                }
            }
            Gate::CRot {
                axis,
                control,
                target,
                angle,
            } => {
                let (c, t) = self.pair(control, target)?;
                self.apply_1q(t, c, rotation_matrix(axis, angle));
            }
        }
        Ok(())
    }

    pub fn apply_all(&mut self, gates: &[Gate]) -> Result<()> {
        gates.iter().try_for_each(|&g| self.apply(g))
    }

    pub fn apply_hadamard(&mut self, qubit: usize) -> Result<()> {
        self.apply(Gate::H(qubit))
    }

    pub fn apply_rotation(&mut self, axis: Axis, qubit: usize, angle: f64) -> Result<()> {
        self.apply(Gate::Rot { axis, qubit, angle })
    }

    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.apply(Gate::Cnot { control, target })
    }

    pub fn apply_controlled_rotation(
        &mut self,
        axis: Axis,
        control: usize,
        target: usize,
        angle: f64,
    ) -> Result<()> {
        self.apply(Gate::CRot {
            axis,
            control,
            target,
            angle,
        })
    }

    pub fn apply_entangler(
        &mut self,
        _kind: EntanglerKind,
        pair: (usize, usize),
        params: &[f64],
    ) -> Result<()> {
        self.apply_all(&entangler_gates(pair.0, pair.1, params)?)
    }

    /// Inverse of [`QuantumState::apply_entangler`]: the gate list reversed
    /// with every angle negated.
    pub fn apply_entangler_adjoint(
        &mut self,
        _kind: EntanglerKind,
        pair: (usize, usize),
        params: &[f64],
    ) -> Result<()> {
        let gates = entangler_gates(pair.0, pair.1, params)?;
        gates.iter().rev().try_for_each(|g| self.apply(g.inverse()))
    }

    fn pair(&self, control: usize, target: usize) -> Result<(usize, usize)> {
        let c = self.mask(control)?;
        let t = self.mask(target)?;
        if control == target {
            return Err(StateError::SameQubit(control));
        }
        Ok((c, t))
    }

    /// Applies `u` to the qubit selected by `tmask` on basis states where all
    /// bits of `cmask` are set.
    fn apply_1q(&mut self, tmask: usize, cmask: usize, u: [[Complex64; 2]; 2]) {
        for k in 0..self.amps.len() {
            if k & tmask != 0 || k & cmask != cmask {
                continue;
            }
            let a0 = self.amps[k];
            let a1 = self.amps[k | tmask];
            self.amps[k] = u[0][0] * a0 + u[0][1] * a1;
            self.amps[k | tmask] = u[1][0] * a0 + u[1][1] * a1;
        }
    }

    /// Writes the `.qsv` format: the qubit count as a little-endian `u64`,
    /// then interleaved `(re, im)` pairs as little-endian `f64`.
    pub fn write_qsv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for a in &self.amps {
            w.write_all(&a.re.to_le_bytes())?;
            w.write_all(&a.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_qsv<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)
            .map_err(|_| StateError::Format("missing qubit count header".into()))?;
        let n = u64::from_le_bytes(word) as usize;
        if n > MAX_QUBITS {
            return Err(StateError::TooManyQubits(n));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let expected = (1usize << n) * 16;
        if bytes.len() != expected {
            return Err(StateError::Format(format!(
                "expected {expected} payload bytes for {n} qubits, found {}",
                bytes.len()
            )));
        }
        let amps = bytes
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().unwrap());
                let im = f64::from_le_bytes(c[8..].try_into().unwrap());
                Complex64::new(re, im)
            })
            .collect();
        Self::from_amplitudes(n, amps)
    }
}

pub fn rotation_matrix(axis: Axis, angle: f64) -> [[Complex64; 2]; 2] {
    let (s, c) = (angle / 2.0).sin_cos();
    let re = |x: f64| Complex64::new(x, 0.0);
    match axis {
        Axis::X => [
            [re(c), Complex64::new(0.0, -s)],
            [Complex64::new(0.0, -s), re(c)],
        ],
        Axis::Y => [[re(c), re(-s)], [re(s), re(c)]],
        Axis::Z => [
            [Complex64::new(c, -s), re(0.0)],
            [re(0.0), Complex64::new(c, s)],
        ],
    }
}

/// `Re⟨λ| ∂U/∂θ |ψ⟩` evaluated right after a rotation `U = exp(−iθP/2)` on
/// `target` (optionally controlled), with `ψ` the state *after* the gate.
///
/// Since `∂U/∂θ = −(i/2)·P·U`, this is the contribution of the gate's angle
/// to the gradient of a real loss whose cotangent on the final state has been
/// pulled back to this point as `λ`.
pub fn rotation_gradient(
    lambda: &QuantumState,
    psi: &QuantumState,
    axis: Axis,
    target: usize,
    control: Option<usize>,
) -> Result<f64> {
    let t = psi.mask(target)?;
    let c = match control {
        Some(q) => psi.pair(q, target)?.0,
        None => 0,
    };
    let (l, p) = (&lambda.amps, &psi.amps);
    let mut acc = 0.0;
    for k in 0..p.len() {
        if k & c != c {
            continue;
        }
        let bit_set = k & t != 0;
        // (P ψ)_k for the Pauli on the target qubit.
        let pk = match axis {
            Axis::X => p[k ^ t],
            Axis::Y => {
                let other = p[k ^ t];
                if bit_set {
                    Complex64::new(-other.im, other.re)
                } else {
                    Complex64::new(other.im, -other.re)
                }
            }
            Axis::Z => {
                if bit_set {
                    -p[k]
                } else {
                    p[k]
                }
            }
        };
        // Re( conj(λ_k) · (−i/2) · pk ) = ½·Im( conj(λ_k) · pk )
        acc += 0.5 * (l[k].re * pk.im - l[k].im * pk.re);
    }
    Ok(acc)
}

/// Reduced density matrix of an ordered qubit subset.
#[derive(Debug, Clone)]
pub struct ReducedState {
    pub subsystem: Vec<usize>,
    pub matrix: DMatrix<Complex64>,
}

impl ReducedState {
    pub fn trace(&self) -> Complex64 {
        self.matrix.trace()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }

    /// Von Neumann entropy in bits. Eigenvalues below `1e-12` count as zero.
    pub fn entropy(&self) -> f64 {
        let s: f64 = self
            .eigenvalues()
            .into_iter()
            .filter(|&v| v > 1e-12)
            .map(|v| -v * v.log2())
            .sum();
        s.max(0.0)
    }
}

/// Reduced state on `subsystem`; the first listed qubit is the most
/// significant bit of the reduced index.
pub fn reduced_density(state: &QuantumState, subsystem: &[usize]) -> Result<ReducedState> {
    if subsystem.is_empty() {
        return Err(StateError::EmptySubsystem);
    }
    let mut seen = vec![false; state.n];
    for &q in subsystem {
        state.mask(q)?;
        if std::mem::replace(&mut seen[q], true) {
            return Err(StateError::DuplicateQubit(q));
        }
    }
    let complement: Vec<usize> = (0..state.n).filter(|&q| !seen[q]).collect();
    let (ds, dc) = (1usize << subsystem.len(), 1usize << complement.len());

    let spread = |idx: usize, qubits: &[usize]| -> usize {
        let width = qubits.len();
        qubits
            .iter()
            .enumerate()
            .filter(|&(pos, _)| idx >> (width - 1 - pos) & 1 == 1)
            .map(|(_, &q)| 1usize << (state.n - 1 - q))
            .sum()
    };
    let block = DMatrix::from_fn(ds, dc, |i, j| {
        state.amps[spread(i, subsystem) | spread(j, &complement)]
    });
    Ok(ReducedState {
        subsystem: subsystem.to_vec(),
        matrix: &block * block.adjoint(),
    })
}

pub fn entropy(state: &QuantumState, subsystem: &[usize]) -> Result<f64> {
    Ok(reduced_density(state, subsystem)?.entropy())
}
