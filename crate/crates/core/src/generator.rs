//! Quantum generator circuits, their parameter layout, and differentiable
//! sampling.
//!
//! # Task-specific ansatz
//!
//! Register order is `color ⊗ address` (FRQI), `intensity ⊗ s₁ ⊗ s₀ ⊗
//! address` (MCRQI) or the bare address register (amplitude encoding). Every
//! qubit starts with a Hadamard, so all-zero parameters produce the uniform
//! superposition, which decodes to a flat gray image.
//!
//! Each of the `L` layers then applies:
//!
//! 1. `Rx(z)` on every noise-receiving qubit, where `z = μ[m,l] + σ[m,l]⊙ε`;
//! 2. `ℓ` entangling sub-layers. A sub-layer walks the ladder register `r`
//!    placing `N2(r[i], r[i+1])` and `N3(r[i], r[i+2])`, then closes the ring
//!    with `N2(r[last], r[0])`. Sub-layers alternate between top-down and
//!    bottom-up (reversed register) order, starting top-down;
//! 3. one `Ry` on the color qubit controlled by each address qubit, plus one
//!    per channel-selector qubit for MCRQI;
//! 4. one uncontrolled `Ry` on the color qubit.
//!
//! Every entangler carries [`ENTANGLER_PARAMS`] angles, so a grayscale layer
//! has `4ℓ(2A−2) + A + 1` angles. For MCRQI the channel selectors only act
//! as extra controls by default; setting
//! [`GeneratorConfig::channel_qubits_in_ladder`] additionally feeds them noise
//! and appends them to the ladder as the finest address bits.
//!
//! # Task-agnostic ansatz
//!
//! All qubits start in `|+⟩`. Each layer applies `Rx` noise on every qubit,
//! `Rz·Ry·Rz` on every qubit and a CNOT ring `q → q+1 (mod n)`.
//!
//! # Parameter layout (version [`LAYOUT_VERSION`])
//!
//! `[μ (M×L×W) | σ (M×L×W) | layer 0 | … | layer L−1]` where `W` is the
//! noise width. Inside a task-specific layer the entangler angles come first
//! in ladder order, then the controlled color rotations by control qubit,
//! then the uncontrolled color rotation.

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image_codec::{CodecError, Encoding, Image};
use crate::statevector::{
    entangler_gates, rotation_gradient, Axis, EntanglerKind, Gate, QuantumState, StateError,
    ENTANGLER_PARAMS,
};

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("generator expects {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("noise draw has {got} components, config needs {expected}")]
    NoiseWidth { expected: usize, got: usize },
    #[error("noise mode {mode} out of range for {modes} modes")]
    NoiseMode { mode: usize, modes: usize },
    #[error("shot count must be at least 1")]
    ZeroShots,
    #[error("probability vector is invalid: {0}")]
    Probabilities(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T> = std::result::Result<T, GeneratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ansatz {
    TaskSpecific,
    TaskAgnostic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub encoding: Encoding,
    pub ansatz: Ansatz,
    pub side: usize,
    pub layers: usize,
    pub sublayers: usize,
    pub modes: usize,
    /// MCRQI only: give the channel-selector qubits noise uploads and a place
    /// in the entangling ladder.
    pub channel_qubits_in_ladder: bool,
    /// Amplitude encoding only: end each task-specific layer with an `Ry` on
    /// every address qubit.
    pub amplitude_rotations: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoding: Encoding::Frqi,
            ansatz: Ansatz::TaskSpecific,
            side: 4,
            layers: 4,
            sublayers: 2,
            modes: 2,
            channel_qubits_in_ladder: false,
            amplitude_rotations: false,
        }
    }
}

impl GeneratorConfig {
    pub fn task_specific(encoding: Encoding, side: usize, layers: usize, sublayers: usize, modes: usize) -> Self {
        Self {
            encoding,
            ansatz: Ansatz::TaskSpecific,
            side,
            layers,
            sublayers,
            modes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GeneratorError::Config(msg));
        if self.layers == 0 || self.sublayers == 0 || self.modes == 0 {
            return bad(format!(
                "layers ({}), sublayers ({}) and modes ({}) must all be at least 1",
                self.layers, self.sublayers, self.modes
            ));
        }
        if self.side < 2 || !self.side.is_power_of_two() {
            return bad(format!("side {} must be a power of two ≥ 2", self.side));
        }
        if self.channel_qubits_in_ladder && self.encoding != Encoding::Mcrqi {
            return bad("channel_qubits_in_ladder requires MCRQI".into());
        }
        if self.amplitude_rotations && self.encoding != Encoding::Amplitude {
            return bad("amplitude_rotations requires amplitude encoding".into());
        }
        Ok(())
    }

    /// Address qubits `A = log₂(side²)`.
    pub fn address_qubits(&self) -> usize {
        2 * self.side.trailing_zeros() as usize
    }

    pub fn n_qubits(&self) -> usize {
        self.address_qubits() + self.encoding.color_qubits()
    }

    fn address_register(&self) -> Vec<usize> {
        let offset = self.encoding.color_qubits();
        (offset..offset + self.address_qubits()).collect()
    }

    /// Qubits that receive `Rx` noise uploads, in noise-slot order.
    pub fn noise_qubits(&self) -> Vec<usize> {
        match self.ansatz {
            Ansatz::TaskAgnostic => (0..self.n_qubits()).collect(),
            Ansatz::TaskSpecific => self.ladder_register(),
        }
    }

    pub fn noise_width(&self) -> usize {
        self.noise_qubits().len()
    }

    fn ladder_register(&self) -> Vec<usize> {
        let mut reg = self.address_register();
        if self.channel_qubits_in_ladder {
            reg.extend([1, 2]);
        }
        reg
    }

    /// Control qubits of the per-layer controlled color rotations.
    fn color_controls(&self) -> Vec<usize> {
        match self.encoding {
            Encoding::Frqi => self.address_register(),
            Encoding::Mcrqi => {
                let mut c = self.address_register();
                c.extend([1, 2]);
                c
            }
            Encoding::Amplitude => Vec::new(),
        }
    }

    fn angles_per_layer(&self) -> usize {
        let n = self.n_qubits();
        match self.ansatz {
            Ansatz::TaskAgnostic => 3 * n,
            Ansatz::TaskSpecific => {
                let ladder = ladder_pairs(&self.ladder_register(), 0).len();
                let color = match self.encoding {
                    Encoding::Amplitude if self.amplitude_rotations => self.address_qubits(),
                    Encoding::Amplitude => 0,
                    _ => self.color_controls().len() + 1,
                };
                self.sublayers * ENTANGLER_PARAMS * ladder + color
            }
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            modes: self.modes,
            layers: self.layers,
            width: self.noise_width(),
            per_layer: self.angles_per_layer(),
        }
    }

    /// Total trainable parameter count `K`.
    pub fn count_parameters(&self) -> usize {
        self.layout().total()
    }
}

pub fn count_parameters(config: &GeneratorConfig) -> usize {
    config.count_parameters()
}

/// Offsets into the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub modes: usize,
    pub layers: usize,
    pub width: usize,
    pub per_layer: usize,
}

impl Layout {
    pub fn noise_block(&self) -> usize {
        self.modes * self.layers * self.width
    }

    pub fn mu(&self, mode: usize, layer: usize, slot: usize) -> usize {
        (mode * self.layers + layer) * self.width + slot
    }

    pub fn sigma(&self, mode: usize, layer: usize, slot: usize) -> usize {
        self.noise_block() + self.mu(mode, layer, slot)
    }

    pub fn layer_offset(&self, layer: usize) -> usize {
        2 * self.noise_block() + layer * self.per_layer
    }

    pub fn total(&self) -> usize {
        2 * self.noise_block() + self.layers * self.per_layer
    }
}

/// Entangler placements of one sub-layer over `register`. Odd sub-layers
/// walk the register bottom-up.
pub fn ladder_pairs(register: &[usize], sublayer: usize) -> Vec<(EntanglerKind, usize, usize)> {
    let r: Vec<usize> = if sublayer.is_multiple_of(2) {
        register.to_vec()
    } else {
        register.iter().rev().copied().collect()
    };
    let len = r.len();
    if len < 2 {
        return Vec::new();
    }
    let mut pairs = Vec::with_capacity(2 * len - 2);
    for i in 0..len - 1 {
        pairs.push((EntanglerKind::N2, r[i], r[i + 1]));
        if i + 2 < len {
            pairs.push((EntanglerKind::N3, r[i], r[i + 2]));
        }
    }
    pairs.push((EntanglerKind::N2, r[len - 1], r[0]));
    pairs
}

/// Flat trainable parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    values: Vec<f64>,
}

impl GeneratorParams {
    pub fn zeros(config: &GeneratorConfig) -> Self {
        Self {
            values: vec![0.0; config.count_parameters()],
        }
    }

    pub fn from_vec(config: &GeneratorConfig, values: Vec<f64>) -> Result<Self> {
        let expected = config.count_parameters();
        if values.len() != expected {
            return Err(GeneratorError::ParamCount {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    /// Layer angles from `N(0, init_std²)`, noise-tuning entries from
    /// `N(0, (init_std/10)²)`. Draws run over the flat vector in order.
    pub fn init<R: Rng + ?Sized>(config: &GeneratorConfig, init_std: f64, rng: &mut R) -> Self {
        let layout = config.layout();
        let noise_end = 2 * layout.noise_block();
        let values = (0..layout.total())
            .map(|i| {
                let std = if i < noise_end { init_std / 10.0 } else { init_std };
                std * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        Self { values }
    }

    /// Assemble from the three layout blocks.
    pub fn pack(config: &GeneratorConfig, mu: &[f64], sigma: &[f64], layers: &[f64]) -> Result<Self> {
        let mut values = Vec::with_capacity(mu.len() + sigma.len() + layers.len());
        values.extend_from_slice(mu);
        values.extend_from_slice(sigma);
        values.extend_from_slice(layers);
        let layout = config.layout();
        if mu.len() != layout.noise_block() || sigma.len() != layout.noise_block() {
            return Err(GeneratorError::ParamCount {
                expected: layout.total(),
                got: values.len(),
            });
        }
        Self::from_vec(config, values)
    }

    /// Split into `(μ, σ, layer angles)`.
    pub fn unpack(&self, config: &GeneratorConfig) -> (&[f64], &[f64], &[f64]) {
        let nb = config.layout().noise_block();
        let (mu, rest) = self.values.split_at(nb);
        let (sigma, layers) = rest.split_at(nb);
        (mu, sigma, layers)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check(&self, config: &GeneratorConfig) -> Result<()> {
        let expected = config.count_parameters();
        if self.values.len() != expected {
            return Err(GeneratorError::ParamCount {
                expected,
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

/// One draw of the tuned noise: a mode and a standard-normal vector shared
/// by every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub mode: usize,
    pub epsilon: Vec<f64>,
}

impl NoiseDraw {
    /// `z = μ[m,l] + σ[m,l]⊙ε` for one layer.
    pub fn tuned(&self, config: &GeneratorConfig, params: &GeneratorParams, layer: usize) -> Vec<f64> {
        let layout = config.layout();
        let v = params.values();
        (0..layout.width)
            .map(|s| {
                v[layout.mu(self.mode, layer, s)] + v[layout.sigma(self.mode, layer, s)] * self.epsilon[s]
            })
            .collect()
    }

    fn check(&self, config: &GeneratorConfig) -> Result<()> {
        if self.mode >= config.modes {
            return Err(GeneratorError::NoiseMode {
                mode: self.mode,
                modes: config.modes,
            });
        }
        let expected = config.noise_width();
        if self.epsilon.len() != expected {
            return Err(GeneratorError::NoiseWidth {
                expected,
                got: self.epsilon.len(),
            });
        }
        Ok(())
    }
}

/// Mode first (uniform), then `ε` slot by slot.
pub fn sample_noise<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> NoiseDraw {
    let mode = rng.random_range(0..config.modes);
    let epsilon = (0..config.noise_width())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    NoiseDraw { mode, epsilon }
}

#[derive(Debug, Clone, Copy)]
enum Route {
    Param(usize),
    Noise { mu: usize, sigma: usize, eps: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Step {
    gate: Gate,
    route: Option<Route>,
}

/// A fully bound generator circuit for one noise draw.
#[derive(Debug, Clone)]
pub struct Circuit {
    n: usize,
    steps: Vec<Step>,
    /// `layer_ends[l]` is the number of steps completed after layer `l`,
    /// with layer 0 being the initial Hadamards.
    layer_ends: Vec<usize>,
}

impl Circuit {
    pub fn build(config: &GeneratorConfig, params: &GeneratorParams, noise: &NoiseDraw) -> Result<Self> {
        config.validate()?;
        params.check(config)?;
        noise.check(config)?;
        let n = config.n_qubits();
        let layout = config.layout();
        let v = params.values();
        let mut c = Circuit {
            n,
            steps: Vec::new(),
            layer_ends: Vec::with_capacity(config.layers + 1),
        };
        for q in 0..n {
            c.fixed(Gate::H(q));
        }
        c.layer_ends.push(c.steps.len());

        let noise_qubits = config.noise_qubits();
        let ladder = config.ladder_register();
        let controls = config.color_controls();
        for l in 0..config.layers {
            let z = noise.tuned(config, params, l);
            for (slot, &q) in noise_qubits.iter().enumerate() {
                c.steps.push(Step {
                    gate: Gate::Rot {
                        axis: Axis::X,
                        qubit: q,
                        angle: z[slot],
                    },
                    route: Some(Route::Noise {
                        mu: layout.mu(noise.mode, l, slot),
                        sigma: layout.sigma(noise.mode, l, slot),
                        eps: noise.epsilon[slot],
                    }),
                });
            }
            let mut p = layout.layer_offset(l);
            match config.ansatz {
                Ansatz::TaskSpecific => {
                    for sub in 0..config.sublayers {
                        for (_, a, b) in ladder_pairs(&ladder, sub) {
                            let gates = entangler_gates(a, b, &v[p..p + ENTANGLER_PARAMS])?;
                            let mut next = p;
                            for g in gates {
                                if let Gate::Rot { .. } = g {
                                    c.param(g, next);
                                    next += 1;
                                } else {
                                    c.fixed(g);
                                }
                            }
                            p += ENTANGLER_PARAMS;
                        }
                    }
                    if config.encoding == Encoding::Amplitude {
                        if config.amplitude_rotations {
                            for &q in &config.address_register() {
                                c.param(rot(Axis::Y, q, v[p]), p);
                                p += 1;
                            }
                        }
                    } else {
                        for &ctrl in &controls {
                            let g = Gate::CRot {
                                axis: Axis::Y,
                                control: ctrl,
                                target: 0,
                                angle: v[p],
                            };
                            c.param(g, p);
                            p += 1;
                        }
                        c.param(rot(Axis::Y, 0, v[p]), p);
                        p += 1;
                    }
                }
                Ansatz::TaskAgnostic => {
                    for q in 0..n {
                        c.param(rot(Axis::Z, q, v[p]), p);
                        c.param(rot(Axis::Y, q, v[p + 1]), p + 1);
                        c.param(rot(Axis::Z, q, v[p + 2]), p + 2);
                        p += 3;
                    }
                    if n > 1 {
                        for q in 0..n {
                            c.fixed(Gate::Cnot {
                                control: q,
                                target: (q + 1) % n,
                            });
                        }
                    }
                }
            }
            debug_assert_eq!(p, layout.layer_offset(l) + layout.per_layer);
            c.layer_ends.push(c.steps.len());
        }
        Ok(c)
    }

    fn fixed(&mut self, gate: Gate) {
        self.steps.push(Step { gate, route: None });
    }

    fn param(&mut self, gate: Gate, index: usize) {
        self.steps.push(Step {
            gate,
            route: Some(Route::Param(index)),
        });
    }

    pub fn n_qubits(&self) -> usize {
        self.n
    }

    pub fn gates(&self) -> impl Iterator<Item = Gate> + '_ {
        self.steps.iter().map(|s| s.gate)
    }

    pub fn run(&self) -> Result<QuantumState> {
        let mut s = QuantumState::zero(self.n)?;
        for step in &self.steps {
            s.apply(step.gate)?;
        }
        Ok(s)
    }

    /// States after each layer; entry 0 follows the initial Hadamards.
    pub fn run_layers(&self) -> Result<Vec<QuantumState>> {
        let mut s = QuantumState::zero(self.n)?;
        let mut out = Vec::with_capacity(self.layer_ends.len());
        let mut done = 0;
        for &end in &self.layer_ends {
            for step in &self.steps[done..end] {
                s.apply(step.gate)?;
            }
            done = end;
            out.push(s.clone());
        }
        Ok(out)
    }

    /// Adjoint-method gradient of a real loss `L(|ψ|²)` given `∂L/∂p` at the
    /// output state `psi`, accumulated into `grad`.
    pub fn backprop(&self, psi: &QuantumState, dl_dp: &[f64], grad: &mut [f64]) -> Result<()> {
        let mut psi = psi.clone();
        let lambda: Vec<_> = psi
            .amplitudes()
            .iter()
            .zip(dl_dp)
            .map(|(a, &g)| a * (2.0 * g))
            .collect();
        let mut lambda = QuantumState::from_amplitudes(self.n, lambda)?;
        for step in self.steps.iter().rev() {
            if let Some(route) = step.route {
                let d = match step.gate {
                    Gate::Rot { axis, qubit, .. } => rotation_gradient(&lambda, &psi, axis, qubit, None)?,
                    Gate::CRot {
                        axis,
                        control,
                        target,
                        ..
                    } => rotation_gradient(&lambda, &psi, axis, target, Some(control))?,
                    _ => 0.0,
                };
                match route {
                    Route::Param(i) => grad[i] += d,
                    Route::Noise { mu, sigma, eps } => {
                        grad[mu] += d;
                        grad[sigma] += d * eps;
                    }
                }
            }
            let inv = step.gate.inverse();
            psi.apply(inv)?;
            lambda.apply(inv)?;
        }
        Ok(())
    }
}

fn rot(axis: Axis, qubit: usize, angle: f64) -> Gate {
    Gate::Rot { axis, qubit, angle }
}

/// Output state of the generator for a fixed noise draw. Dispatches on
/// [`GeneratorConfig::ansatz`].
pub fn forward(config: &GeneratorConfig, params: &GeneratorParams, noise: &NoiseDraw) -> Result<QuantumState> {
    Circuit::build(config, params, noise)?.run()
}

/// Task-agnostic forward pass; errors if the config names another ansatz.
pub fn forward_agnostic(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    noise: &NoiseDraw,
) -> Result<QuantumState> {
    if config.ansatz != Ansatz::TaskAgnostic {
        return Err(GeneratorError::Config("forward_agnostic needs the task-agnostic ansatz".into()));
    }
    forward(config, params, noise)
}

/// Result of [`shot_noise_perturb`]: the perturbed distribution and the
/// additive deviation `P̂ − P` that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotNoise {
    pub perturbed: Vec<f64>,
    pub deviation: Vec<f64>,
}

/// Multinomial sample of `shots` measurements from `p`, drawn bin by bin as
/// conditional binomials.
pub fn sample_counts<R: Rng + ?Sized>(p: &[f64], shots: u64, rng: &mut R) -> Result<Vec<u64>> {
    if shots == 0 {
        return Err(GeneratorError::ZeroShots);
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(GeneratorError::Probabilities("entries must be finite and non-negative".into()));
    }
    let mut tail: Vec<f64> = vec![0.0; p.len() + 1];
    for i in (0..p.len()).rev() {
        tail[i] = tail[i + 1] + p[i];
    }
    if tail[0] <= 0.0 {
        return Err(GeneratorError::Probabilities("total mass is zero".into()));
    }
    let mut left = shots;
    let mut counts = vec![0u64; p.len()];
    for i in 0..p.len() {
        if left == 0 {
            break;
        }
        let no_mass_after = tail[i + 1] <= 0.0;
        let c = if no_mass_after {
            left
        } else {
            let q = (p[i] / tail[i]).clamp(0.0, 1.0);
            Binomial::new(left, q)
                .map_err(|e| GeneratorError::Probabilities(e.to_string()))?
                .sample(rng)
        };
        counts[i] = c;
        left -= c;
    }
    Ok(counts)
}

/// Replaces `P` by `renorm(clip(P + (P̂ − P)))` where `P̂` are empirical
/// frequencies of `shots` measurements.
pub fn shot_noise_perturb<R: Rng + ?Sized>(p: &[f64], shots: u64, rng: &mut R) -> Result<ShotNoise> {
    let counts = sample_counts(p, shots, rng)?;
    let deviation: Vec<f64> = counts
        .iter()
        .zip(p)
        .map(|(&c, &pi)| c as f64 / shots as f64 - pi)
        .collect();
    let perturbed = apply_deviation(p, &deviation);
    Ok(ShotNoise { perturbed, deviation })
}

/// `renorm(clip(p + deviation))` with `deviation` held constant.
pub fn apply_deviation(p: &[f64], deviation: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = p.iter().zip(deviation).map(|(a, d)| (a + d).max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    clipped.into_iter().map(|c| c / total).collect()
}

/// Pulls a cotangent on the perturbed distribution back to `p`, treating the
/// deviation as a constant.
pub fn deviation_vjp(p: &[f64], deviation: &[f64], grad: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = p.iter().zip(deviation).map(|(a, d)| (a + d).max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let dot: f64 = grad.iter().zip(&clipped).map(|(g, c)| g * c).sum();
    p.iter()
        .zip(deviation)
        .zip(grad)
        .map(|((a, d), g)| {
            if a + d > 0.0 {
                g / total - dot / (total * total)
            } else {
                0.0
            }
        })
        .collect()
}

/// Everything needed to differentiate one generated image.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub noise: NoiseDraw,
    pub state: QuantumState,
    pub shot_noise: Option<ShotNoise>,
    pub image: Image,
}

impl GeneratedSample {
    /// Distribution the image was decoded from.
    pub fn decoded_probabilities(&self) -> Vec<f64> {
        match &self.shot_noise {
            Some(s) => s.perturbed.clone(),
            None => self.state.probabilities(),
        }
    }
}

/// Samples a batch. Noise draws come from `rng` in batch order, the circuits
/// run in parallel, then shot noise (if any) is drawn in batch order.
pub fn generate_batch<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    batch: usize,
    shots: Option<u64>,
    rng: &mut R,
) -> Result<Vec<GeneratedSample>> {
    let noises: Vec<NoiseDraw> = (0..batch).map(|_| sample_noise(config, rng)).collect();
    generate_from_noise(config, params, noises, shots, rng)
}

/// Like [`generate_batch`] with the noise draws supplied by the caller.
/// `rng` is only consumed for shot noise.
pub fn generate_from_noise<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    noises: Vec<NoiseDraw>,
    shots: Option<u64>,
    rng: &mut R,
) -> Result<Vec<GeneratedSample>> {
    let states: Vec<QuantumState> = noises
        .par_iter()
        .map(|n| forward(config, params, n))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(noises.len());
    for (noise, state) in noises.into_iter().zip(states) {
        let probs = state.probabilities();
        let shot_noise = shots.map(|s| shot_noise_perturb(&probs, s, rng)).transpose()?;
        let image = match &shot_noise {
            Some(s) => config.encoding.decode(&s.perturbed)?,
            None => config.encoding.decode(&probs)?,
        };
        out.push(GeneratedSample {
            noise,
            state,
            shot_noise,
            image,
        });
    }
    Ok(out)
}

/// One image: noise draw, forward, optional shot noise, decode.
pub fn generate_image<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    rng: &mut R,
    shots: Option<u64>,
) -> Result<Image> {
    Ok(generate_batch(config, params, 1, shots, rng)?.remove(0).image)
}

/// Gradient with respect to all parameters of `Σᵢ ⟨image_grads[i], imageᵢ⟩`.
/// Per-sample gradients are computed in parallel and summed in batch order.
pub fn backprop_batch(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    samples: &[GeneratedSample],
    image_grads: &[Image],
) -> Result<Vec<f64>> {
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .zip(image_grads.par_iter())
        .map(|(s, g)| backprop_sample(config, params, s, g))
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; params.len()];
    for g in per_sample {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    Ok(total)
}

pub fn backprop_sample(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    sample: &GeneratedSample,
    image_grad: &Image,
) -> Result<Vec<f64>> {
    let probs = sample.state.probabilities();
    let dl_dp = match &sample.shot_noise {
        Some(s) => {
            let g = config.encoding.decode_vjp(&s.perturbed, image_grad)?;
            deviation_vjp(&probs, &s.deviation, &g)
        }
        None => config.encoding.decode_vjp(&probs, image_grad)?,
    };
    let circuit = Circuit::build(config, params, &sample.noise)?;
    let mut grad = vec![0.0; params.len()];
    circuit.backprop(&sample.state, &dl_dp, &mut grad)?;
    Ok(grad)
}

/// Decoded image for a fixed noise draw, without shot noise.
pub fn decode_for(config: &GeneratorConfig, params: &GeneratorParams, noise: &NoiseDraw) -> Result<Image> {
    let state = forward(config, params, noise)?;
    Ok(config.encoding.decode(&state.probabilities())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn gray(side: usize, layers: usize, modes: usize) -> GeneratorConfig {
        GeneratorConfig::task_specific(Encoding::Frqi, side, layers, 2, modes)
    }

    #[test]
    fn table_rows() {
        assert_eq!(gray(4, 8, 2).count_parameters(), 552);
        assert_eq!(gray(32, 8, 2).count_parameters(), 1560);
        assert_eq!(gray(32, 8, 10).count_parameters(), 2840);
    }

    #[test]
    fn ladder_has_2a_minus_2_gates() {
        for a in 2..12 {
            let reg: Vec<usize> = (0..a).collect();
            assert_eq!(ladder_pairs(&reg, 0).len(), 2 * a - 2);
            assert_eq!(ladder_pairs(&reg, 1).len(), 2 * a - 2);
        }
        let down = ladder_pairs(&[1, 2, 3], 0);
        assert_eq!(down[0], (EntanglerKind::N2, 1, 2));
        assert_eq!(down[1], (EntanglerKind::N3, 1, 3));
        let up = ladder_pairs(&[1, 2, 3], 1);
        assert_eq!(up[0], (EntanglerKind::N2, 3, 2));
    }

    #[test]
    fn zero_params_give_gray() {
        let cfg = gray(4, 2, 2);
        let params = GeneratorParams::zeros(&cfg);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let img = generate_image(&cfg, &params, &mut rng, None).unwrap();
        assert!(img.data().iter().all(|&x| (x - 0.5).abs() < 1e-10));
    }

    #[test]
    fn sigma_zero_gives_mu() {
        let cfg = gray(4, 2, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut params = GeneratorParams::init(&cfg, 0.1, &mut rng);
        let layout = cfg.layout();
        let nb = layout.noise_block();
        params.values_mut()[nb..2 * nb].fill(0.0);
        let noise = sample_noise(&cfg, &mut rng);
        for l in 0..cfg.layers {
            let z = noise.tuned(&cfg, &params, l);
            for (s, zs) in z.iter().enumerate() {
                assert_eq!(*zs, params.values()[layout.mu(noise.mode, l, s)]);
            }
        }
    }

    #[test]
    fn wrong_param_count_is_error() {
        let cfg = gray(4, 2, 2);
        assert!(matches!(
            GeneratorParams::from_vec(&cfg, vec![0.0; 3]),
            Err(GeneratorError::ParamCount { got: 3, .. })
        ));
    }

    #[test]
    fn counts_example_from_fixed_counts() {
        let p = [0.5, 0.5];
        let dev = [0.25, -0.25];
        assert_eq!(apply_deviation(&p, &dev), vec![0.75, 0.25]);
    }

    #[test]
    fn zero_shots_is_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(matches!(
            shot_noise_perturb(&[1.0], 0, &mut rng),
            Err(GeneratorError::ZeroShots)
        ));
    }

    #[test]
    fn counts_sum_to_shots() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let p = [0.1, 0.0, 0.4, 0.2, 0.3];
        let c = sample_counts(&p, 1000, &mut rng).unwrap();
        assert_eq!(c.iter().sum::<u64>(), 1000);
        assert_eq!(c[1], 0);
    }
}
