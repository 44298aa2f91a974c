//! Sample-quality and circuit-analysis tools: kernel MMD with checkpoint
//! selection, layer-wise subsystem entropies, generator gradient magnitude
//! and per-mode PCA.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{CriticError, CriticNetwork};
use crate::generator::{
    backprop_batch, Circuit, GeneratedSample, GeneratorConfig, GeneratorError, GeneratorParams,
    NoiseDraw,
};
use crate::image_codec::Image;
use crate::statevector::{entropy, StateError};
use crate::trainer::generator_image_grads;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("sample sets differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("samples have inconsistent dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    State(#[from] StateError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `xᵀy`
    Linear,
    /// `(xᵀy + 1)²`
    Poly,
    /// `exp(−‖x−y‖²/2)`
    Rbf,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Linear, Kernel::Poly, Kernel::Rbf];

    pub fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Linear => dot(x, y),
            Kernel::Poly => (dot(x, y) + 1.0).powi(2),
            Kernel::Rbf => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / 2.0).exp()
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn kernel_sum(kernel: Kernel, a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .map(|x| b.iter().map(|y| kernel.eval(x, y)).sum())
        .collect();
    rows.iter().sum()
}

/// Cross term summed so that swapping the two sets reproduces the same
/// floating-point operations.
fn cross_sum(kernel: Kernel, x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let rows: Vec<f64> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            (0..y.len())
                .map(|j| 0.5 * (kernel.eval(x[i], y[j]) + kernel.eval(x[j], y[i])))
                .sum()
        })
        .collect();
    rows.iter().sum()
}

fn check_sets<T: AsRef<[f64]>>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(MetricsError::SizeMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    let d = x[0].as_ref().len();
    for s in x.iter().chain(y) {
        if s.as_ref().len() != d {
            return Err(MetricsError::DimMismatch(d, s.as_ref().len()));
        }
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD between two equally sized sample sets.
pub fn mmd<T: AsRef<[f64]> + Sync>(x: &[T], y: &[T], kernel: Kernel) -> Result<f64> {
    check_sets(x, y)?;
    let xs: Vec<&[f64]> = x.iter().map(AsRef::as_ref).collect();
    let ys: Vec<&[f64]> = y.iter().map(AsRef::as_ref).collect();
    let k2 = (xs.len() * xs.len()) as f64;
    let sxx = kernel_sum(kernel, &xs, &xs);
    let syy = kernel_sum(kernel, &ys, &ys);
    let sxy = cross_sum(kernel, &xs, &ys);
    Ok((sxx + syy) / k2 - 2.0 * sxy / k2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub linear: f64,
    pub poly: f64,
    pub rbf: f64,
    pub samples: usize,
}

impl MmdReport {
    pub fn get(&self, kernel: Kernel) -> f64 {
        match kernel {
            Kernel::Linear => self.linear,
            Kernel::Poly => self.poly,
            Kernel::Rbf => self.rbf,
        }
    }
}

pub fn mmd_report<T: AsRef<[f64]> + Sync>(x: &[T], y: &[T]) -> Result<MmdReport> {
    Ok(MmdReport {
        linear: mmd(x, y, Kernel::Linear)?,
        poly: mmd(x, y, Kernel::Poly)?,
        rbf: mmd(x, y, Kernel::Rbf)?,
        samples: x.len(),
    })
}

/// Upper quartile by linear interpolation at position `0.75·(n−1)` of the
/// sorted series.
pub fn upper_quartile(series: &[f64]) -> f64 {
    let mut s = series.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = 0.75 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Min/Q3 normalization clipped at zero; a series with `Q3 = min` maps to
/// all zeros.
pub fn normalize_series(series: &[f64]) -> Vec<f64> {
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let q3 = upper_quartile(series);
    if q3 <= min {
        return vec![0.0; series.len()];
    }
    series
        .iter()
        .map(|v| ((v - min) / (q3 - min)).max(0.0))
        .collect()
}

/// Centered moving average; near the ends the window shrinks to the
/// available neighbours.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub const SELECTION_WINDOW: usize = 9;

/// Index of the best checkpoint given one MMD series per kernel: normalize
/// each series, average across kernels, smooth, take the first minimum.
/// Returns `None` for empty input.
pub fn select_checkpoint(series: &[Vec<f64>]) -> Option<usize> {
    let n = series.first()?.len();
    if n == 0 || series.iter().any(|s| s.len() != n) {
        return None;
    }
    let mut avg = vec![0.0; n];
    for s in series {
        for (a, v) in avg.iter_mut().zip(normalize_series(s)) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= series.len() as f64;
    }
    let smooth = moving_average(&avg, SELECTION_WINDOW);
    let mut best = 0;
    for (i, &v) in smooth.iter().enumerate() {
        if v < smooth[best] {
            best = i;
        }
    }
    Some(best)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub layer: usize,
    pub mode: usize,
    pub subset: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub draws: usize,
}

/// Entropy statistics per layer, noise mode and qubit subset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub rows: Vec<EntropyRow>,
}

impl EntropyTrace {
    pub fn get(&self, layer: usize, mode: usize, subset: &[usize]) -> Option<&EntropyRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.mode == mode && r.subset == subset)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mode,subset,mean,std\n");
        for r in &self.rows {
            let subset: Vec<String> = r.subset.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer,
                r.mode,
                subset.join(" "),
                r.mean,
                r.std
            ));
        }
        out
    }
}

/// Von Neumann entropy of each subset after every layer (layer 0 is the
/// state right after the initial Hadamards), aggregated per noise mode.
pub fn layerwise_entropy(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    subsets: &[Vec<usize>],
    draws: &[NoiseDraw],
) -> Result<EntropyTrace> {
    // per draw: [layer][subset] entropy
    let per_draw: Vec<Vec<Vec<f64>>> = draws
        .par_iter()
        .map(|d| -> Result<Vec<Vec<f64>>> {
            let states = Circuit::build(config, params, d)?.run_layers()?;
            states
                .iter()
                .map(|s| {
                    subsets
                        .iter()
                        .map(|sub| entropy(s, sub).map_err(MetricsError::from))
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut trace = EntropyTrace::default();
    for layer in 0..=config.layers {
        for mode in 0..config.modes {
            for (si, sub) in subsets.iter().enumerate() {
                let vals: Vec<f64> = draws
                    .iter()
                    .zip(&per_draw)
                    .filter(|(d, _)| d.mode == mode)
                    .map(|(_, e)| e[layer][si])
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let (mean, std) = mean_std(&vals);
                trace.rows.push(EntropyRow {
                    layer,
                    mode,
                    subset: sub.clone(),
                    mean,
                    std,
                    draws: vals.len(),
                });
            }
        }
    }
    Ok(trace)
}

/// `‖∇θ L_G‖ / K` for a fixed batch of generated samples.
pub fn grad_magnitude(
    config: &GeneratorConfig,
    params: &GeneratorParams,
    critic: &CriticNetwork,
    batch: &[GeneratedSample],
) -> Result<f64> {
    let images: Vec<Image> = batch.iter().map(|s| s.image.clone()).collect();
    let (_, grads) = generator_image_grads(critic, &images)?;
    let g = backprop_batch(config, params, batch, &grads)?;
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(norm / params.len() as f64)
}

/// Principal component analysis of one mode's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModePca {
    pub mean: Vec<f64>,
    /// Principal axes (unit vectors), by decreasing variance.
    pub axes: Vec<Vec<f64>>,
    /// Standard deviation along each axis.
    pub sigmas: Vec<f64>,
    pub zero_variance: bool,
    /// `mean − 3σ₁·axis₁`, clamped to `[0, 1]`.
    pub minus: Vec<f64>,
    /// `mean + 3σ₁·axis₁`, clamped to `[0, 1]`.
    pub plus: Vec<f64>,
}

impl ModePca {
    pub fn axis(&self) -> Option<&[f64]> {
        self.axes.first().map(Vec::as_slice)
    }

    pub fn sigma(&self) -> f64 {
        self.sigmas.first().copied().unwrap_or(0.0)
    }

    /// Coordinates of `x − mean` in units of each axis' σ.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.axes
            .iter()
            .zip(&self.sigmas)
            .map(|(a, &s)| {
                let c: f64 = x.iter().zip(&self.mean).zip(a).map(|((x, m), a)| (x - m) * a).sum();
                if s > 0.0 {
                    c / s
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for ((a, &s), &c) in self.axes.iter().zip(&self.sigmas).zip(coords) {
            for (o, v) in out.iter_mut().zip(a) {
                *o += s * c * v;
            }
        }
        out
    }
}

const ZERO_VARIANCE: f64 = 1e-12;

pub fn mode_pca<T: AsRef<[f64]>>(samples: &[T]) -> Result<ModePca> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let d = samples[0].as_ref().len();
    for s in samples {
        if s.as_ref().len() != d {
            return Err(MetricsError::DimMismatch(d, s.as_ref().len()));
        }
    }
    let k = samples.len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.as_ref()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let centered = DMatrix::from_fn(k, d, |i, j| samples[i].as_ref()[j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut axes = Vec::new();
    let mut sigmas = Vec::new();
    for i in order {
        let sigma = svd.singular_values[i] / ((k - 1) as f64).sqrt();
        if sigma <= ZERO_VARIANCE {
            continue;
        }
        let mut axis: Vec<f64> = v_t.row(i).iter().copied().collect();
        // Fix the sign so the largest-magnitude component is positive.
        let lead = axis
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes.push(axis);
        sigmas.push(sigma);
    }
    let zero_variance = axes.is_empty();
    let shifted = |sign: f64| -> Vec<f64> {
        match axes.first() {
            Some(a) => mean
                .iter()
                .zip(a)
                .map(|(m, v)| (m + sign * 3.0 * sigmas[0] * v).clamp(0.0, 1.0))
                .collect(),
            None => mean.clone(),
        }
    };
    let (minus, plus) = (shifted(-1.0), shifted(1.0));
    Ok(ModePca {
        mean,
        axes,
        sigmas,
        zero_variance,
        minus,
        plus,
    })
}
