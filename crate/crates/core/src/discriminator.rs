//! Convolutional Wasserstein critic.
//!
//! Three `5×5` stride-2 convolutions with symmetric zero padding of 2 (each
//! maps side `s` to `⌈s/2⌉`), each followed by a leaky ReLU, then a dense map
//! from the flattened features to one unbounded score.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{ConvGeom, DiffError, Tape, Tensor, Var};
use crate::image_codec::Image;

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("invalid critic config: {0}")]
    Config(String),
    #[error("critic expects {expected} images, got {got}")]
    ImageShape { expected: String, got: String },
    #[error("critic parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T> = std::result::Result<T, CriticError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub side: usize,
    pub channels: usize,
    pub filters: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            side: 32,
            channels: 1,
            filters: [64, 128, 256],
            kernel: 5,
            stride: 2,
            leaky_slope: 0.2,
        }
    }
}

impl CriticConfig {
    /// Small filter counts for desk-scale runs.
    pub fn desk(side: usize, channels: usize) -> Self {
        Self {
            side,
            channels,
            filters: [8, 16, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.channels == 0 || self.filters.contains(&0) {
            return Err(CriticError::Config(
                "side, channels and filter counts must be positive".into(),
            ));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) || self.stride == 0 {
            return Err(CriticError::Config(format!(
                "kernel {} must be odd and stride {} positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            pad: self.kernel / 2,
        }
    }

    /// Activation sides after each convolution.
    pub fn sides(&self) -> [usize; 3] {
        let g = self.geom();
        let mut s = self.side;
        let mut out = [0; 3];
        for o in &mut out {
            s = g.output_side(s, self.kernel).unwrap_or(0);
            *o = s;
        }
        out
    }

    pub fn flat_features(&self) -> usize {
        let s = self.sides()[2];
        self.filters[2] * s * s
    }

    /// Named parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut cin = self.channels;
        let mut shapes = Vec::with_capacity(8);
        for (i, &f) in self.filters.iter().enumerate() {
            shapes.push((format!("conv{i}.weight"), vec![f, cin, k, k]));
            shapes.push((format!("conv{i}.bias"), vec![f]));
            cin = f;
        }
        shapes.push(("dense.weight".into(), vec![self.flat_features()]));
        shapes.push(("dense.bias".into(), vec![]));
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticNetwork {
    config: CriticConfig,
    params: Vec<Tensor>,
}

impl CriticNetwork {
    /// Weights from `N(0, 1/fan_in)`, biases zero. Layers are drawn in order,
    /// each weight tensor in row-major order.
    pub fn init<R: Rng + ?Sized>(config: CriticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("bias") {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let std = (fan_in as f64).sqrt().recip();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Tensor::new(shape, data).expect("shape and data agree")
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn zeros(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: CriticConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(CriticError::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in shapes.into_iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(CriticError::ParamShape {
                    name,
                    expected: shape,
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.params)
            .collect()
    }

    /// Registers the weights on `tape`, as variables or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.var(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Scores `[B, C, H, W] -> [B]` with weights already bound to the tape.
    pub fn apply<'t>(&self, weights: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let geom = self.config.geom();
        let batch = x.shape()[0];
        let mut h = x;
        for layer in 0..3 {
            let (w, b) = (weights[2 * layer], weights[2 * layer + 1]);
            let conv = h.conv2d(w, geom)?;
            let bias = b.broadcast_channel(&conv.shape())?;
            h = conv.add(bias)?.leaky_relu(self.config.leaky_slope)?;
        }
        let flat = h.reshape(&[batch, self.config.flat_features()])?;
        let dense = flat.mul(weights[6].tile(batch)?)?.sum_rows()?;
        Ok(dense.add(weights[7].fill(&[batch])?)?)
    }

    /// Packs images into a `[B, C, H, W]` tensor.
    pub fn batch_tensor(&self, images: &[Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(CriticError::EmptyBatch);
        }
        let (s, c) = (self.config.side, self.config.channels);
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for img in images {
            if img.height() != s || img.width() != s || img.channels() != c {
                return Err(CriticError::ImageShape {
                    expected: format!("{s}×{s}×{c}"),
                    got: format!("{}×{}×{}", img.height(), img.width(), img.channels()),
                });
            }
            for ch in 0..c {
                for r in 0..s {
                    for col in 0..s {
                        data.push(img.get(r, col, ch));
                    }
                }
            }
        }
        Ok(Tensor::new(vec![images.len(), c, s, s], data)?)
    }

    /// Unpacks `[B, C, H, W]` back into images.
    pub fn tensor_images(&self, t: &Tensor) -> Result<Vec<Image>> {
        let (s, c) = (self.config.side, self.config.channels);
        let b = t.shape()[0];
        let plane = s * s;
        (0..b)
            .map(|i| {
                let mut data = vec![0.0; c * plane];
                for ch in 0..c {
                    for p in 0..plane {
                        data[p * c + ch] = t.data()[(i * c + ch) * plane + p];
                    }
                }
                Image::new(s, s, c, data).map_err(|e| CriticError::Config(e.to_string()))
            })
            .collect()
    }

    pub fn forward(&self, images: &[Image]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let w = self.bind(&tape, false);
        let x = tape.constant(self.batch_tensor(images)?);
        Ok(self.apply(&w, x)?.value().data().to_vec())
    }

    pub fn score(&self, image: &Image) -> Result<f64> {
        Ok(self.forward(std::slice::from_ref(image))?[0])
    }

    /// `∇ₓ D(x)` for each image.
    pub fn input_gradient(&self, images: &[Image]) -> Result<Vec<Image>> {
        let tape = Tape::new();
        let w = self.bind(&tape, false);
        let x = tape.var(self.batch_tensor(images)?);
        let total = self.apply(&w, x)?.sum()?;
        let g = tape.gradient(total, &[x])?[0];
        self.tensor_images(&g.value())
    }
}
