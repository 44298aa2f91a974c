//! Classical images and their quantum encodings.
//!
//! Pixels are addressed in Morton (Z) order: the two most significant bits of
//! the address select the quadrant, the next two the sub-quadrant, and so on,
//! with the row bit ahead of the column bit in every pair.
//!
//! Three encodings are supported:
//!
//! * **FRQI**: one color qubit followed by `A` address qubits. Pixel `x_j`
//!   contributes `cos(πx_j/2)/√2^A` on `|0⟩|j⟩` and `sin(πx_j/2)/√2^A` on
//!   `|1⟩|j⟩`.
//! * **MCRQI**: an intensity qubit and two channel-selector qubits
//!   (`00`=R, `01`=G, `10`=B, `11`=α) ahead of the address register, with an
//!   extra factor `1/2`. The α channel is always encoded as zero and ignored
//!   on decoding.
//! * **Amplitude**: `x/‖x‖` directly on the address register.
//!
//! Decoders accept any probability vector, valid encoding or not, and come
//! with vector-Jacobian products so generator training can differentiate
//! through them.

use std::f64::consts::{FRAC_2_PI, FRAC_PI_2, PI};
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::statevector::{QuantumState, StateError};

/// Decoded value of a pixel that received no probability mass.
pub const NEUTRAL_GRAY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("side {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("pixel ({row}, {col}) outside a {side}×{side} image")]
    PixelOutOfRange { row: usize, col: usize, side: usize },
    #[error("Morton index {index} outside a {side}×{side} image")]
    IndexOutOfRange { index: usize, side: usize },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f64 },
    #[error("image has {got} values but {height}×{width}×{channels} needs {expected}")]
    DataLength {
        height: usize,
        width: usize,
        channels: usize,
        expected: usize,
        got: usize,
    },
    #[error("{encoding} needs {expected}, got {got}")]
    Layout {
        encoding: &'static str,
        expected: String,
        got: String,
    },
    #[error("negative probability {value} at basis state {index}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("amplitude encoding of an all-zero image is undefined")]
    ZeroImage,
    #[error("resize target must be positive")]
    ZeroSize,
    #[error("malformed image file: {0}")]
    Format(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(CodecError::DataLength {
                height,
                width,
                channels,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(side: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(side, side, 1, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    pub fn check_range(&self) -> Result<()> {
        match self
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            Some((index, &value)) => Err(CodecError::ValueOutOfRange { index, value }),
            None => Ok(()),
        }
    }

    /// `1 − x` on every value, for display of inverted datasets.
    pub fn inverted(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| 1.0 - v).collect(),
            ..self.clone()
        }
    }

    fn square_side(&self, encoding: &'static str) -> Result<usize> {
        if self.height != self.width {
            return Err(CodecError::Layout {
                encoding,
                expected: "a square image".into(),
                got: format!("{}×{}", self.height, self.width),
            });
        }
        log2_exact(self.height)?;
        Ok(self.height)
    }
}

fn log2_exact(side: usize) -> Result<usize> {
    if side == 0 || !side.is_power_of_two() {
        return Err(CodecError::NotPowerOfTwo(side));
    }
    Ok(side.trailing_zeros() as usize)
}

/// Number of address qubits for a `side`×`side` image.
pub fn address_qubits(side: usize) -> Result<usize> {
    Ok(2 * log2_exact(side)?)
}

pub fn morton_index(row: usize, col: usize, side: usize) -> Result<usize> {
    let bits = log2_exact(side)?;
    if row >= side || col >= side {
        return Err(CodecError::PixelOutOfRange { row, col, side });
    }
    let mut j = 0;
    for b in (0..bits).rev() {
        j = (j << 2) | ((row >> b & 1) << 1) | (col >> b & 1);
    }
    Ok(j)
}

pub fn morton_inverse(index: usize, side: usize) -> Result<(usize, usize)> {
    let bits = log2_exact(side)?;
    if index >= side * side {
        return Err(CodecError::IndexOutOfRange { index, side });
    }
    let (mut row, mut col) = (0, 0);
    for b in 0..bits {
        col |= (index >> (2 * b) & 1) << b;
        row |= (index >> (2 * b + 1) & 1) << b;
    }
    Ok((row, col))
}

/// Morton position of every row-major pixel.
fn morton_table(side: usize) -> Result<Vec<usize>> {
    let mut table = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            table.push(morton_index(r, c, side)?);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Frqi,
    Mcrqi,
    Amplitude,
}

impl Encoding {
    pub fn channels(self) -> usize {
        match self {
            Encoding::Mcrqi => 3,
            _ => 1,
        }
    }

    /// Qubits ahead of the address register.
    pub fn color_qubits(self) -> usize {
        match self {
            Encoding::Frqi => 1,
            Encoding::Mcrqi => 3,
            Encoding::Amplitude => 0,
        }
    }

    pub fn n_qubits(self, side: usize) -> Result<usize> {
        Ok(address_qubits(side)? + self.color_qubits())
    }

    pub fn encode(self, image: &Image) -> Result<QuantumState> {
        match self {
            Encoding::Frqi => frqi_encode(image),
            Encoding::Mcrqi => mcrqi_encode(image),
            Encoding::Amplitude => amplitude_encode(image),
        }
    }

    pub fn decode(self, probs: &[f64]) -> Result<Image> {
        match self {
            Encoding::Frqi => frqi_decode(probs),
            Encoding::Mcrqi => mcrqi_decode(probs),
            Encoding::Amplitude => amplitude_decode(probs),
        }
    }

    /// Pulls an image cotangent back to the probability vector.
    pub fn decode_vjp(self, probs: &[f64], grad: &Image) -> Result<Vec<f64>> {
        match self {
            Encoding::Frqi => frqi_decode_vjp(probs, grad),
            Encoding::Mcrqi => mcrqi_decode_vjp(probs, grad),
            Encoding::Amplitude => amplitude_decode_vjp(probs, grad),
        }
    }
}

impl std::fmt::Display for Encoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Encoding::Frqi => "frqi",
            Encoding::Mcrqi => "mcrqi",
            Encoding::Amplitude => "amplitude",
        })
    }
}

fn expect_channels(image: &Image, channels: usize, encoding: &'static str) -> Result<()> {
    if image.channels != channels {
        return Err(CodecError::Layout {
            encoding,
            expected: format!("{channels} channel(s)"),
            got: format!("{} channel(s)", image.channels),
        });
    }
    Ok(())
}

pub fn frqi_encode(image: &Image) -> Result<QuantumState> {
    expect_channels(image, 1, "FRQI")?;
    let side = image.square_side("FRQI")?;
    image.check_range()?;
    let a = address_qubits(side)?;
    let npix = side * side;
    let norm = (npix as f64).sqrt().recip();
    let mut amps = vec![0.0; 2 * npix];
    for (pix, j) in morton_table(side)?.into_iter().enumerate() {
        let (s, c) = (FRAC_PI_2 * image.data[pix]).sin_cos();
        amps[j] = c * norm;
        amps[npix + j] = s * norm;
    }
    Ok(QuantumState::from_real(a + 1, &amps)?)
}

fn check_probs(probs: &[f64]) -> Result<()> {
    match probs.iter().enumerate().find(|(_, &p)| p < 0.0) {
        Some((index, &value)) => Err(CodecError::NegativeProbability { index, value }),
        None => Ok(()),
    }
}

/// Side of the image whose address register spans `len` basis states.
fn side_for(len: usize, encoding: &'static str) -> Result<usize> {
    let bad = || CodecError::Layout {
        encoding,
        expected: "a probability vector over an even number of address qubits".into(),
        got: format!("length {len}"),
    };
    if len == 0 || !len.is_power_of_two() {
        return Err(bad());
    }
    let a = len.trailing_zeros() as usize;
    if !a.is_multiple_of(2) {
        return Err(bad());
    }
    Ok(1 << (a / 2))
}

fn split_probs(probs: &[f64], blocks: usize, encoding: &'static str) -> Result<usize> {
    if !probs.len().is_multiple_of(blocks) {
        return Err(CodecError::Layout {
            encoding,
            expected: format!("a length divisible by {blocks}"),
            got: format!("length {}", probs.len()),
        });
    }
    check_probs(probs)?;
    side_for(probs.len() / blocks, encoding)
}

/// `(2/π)·atan2(√p1, √p0)`, the angle that reproduces the ratio `p0 : p1`.
fn angle_decode(p0: f64, p1: f64) -> f64 {
    if p0 + p1 == 0.0 {
        NEUTRAL_GRAY
    } else {
        FRAC_2_PI * p1.sqrt().atan2(p0.sqrt())
    }
}

fn angle_decode_grad(p0: f64, p1: f64) -> (f64, f64) {
    if p0 <= 0.0 || p1 <= 0.0 {
        return (0.0, 0.0);
    }
    let (a, b, p) = (p0.sqrt(), p1.sqrt(), p0 + p1);
    (-b / (a * p) / PI, a / (b * p) / PI)
}

pub fn frqi_decode(probs: &[f64]) -> Result<Image> {
    let side = split_probs(probs, 2, "FRQI")?;
    let npix = side * side;
    let data = morton_table(side)?
        .into_iter()
        .map(|j| angle_decode(probs[j], probs[npix + j]))
        .collect();
    Image::gray(side, data)
}

pub fn frqi_decode_vjp(probs: &[f64], grad: &Image) -> Result<Vec<f64>> {
    let side = split_probs(probs, 2, "FRQI")?;
    expect_shape(grad, side, 1, "FRQI")?;
    let npix = side * side;
    let mut out = vec![0.0; probs.len()];
    for (pix, j) in morton_table(side)?.into_iter().enumerate() {
        let (d0, d1) = angle_decode_grad(probs[j], probs[npix + j]);
        out[j] = grad.data[pix] * d0;
        out[npix + j] = grad.data[pix] * d1;
    }
    Ok(out)
}

fn expect_shape(image: &Image, side: usize, channels: usize, encoding: &'static str) -> Result<()> {
    if image.height != side || image.width != side || image.channels != channels {
        return Err(CodecError::Layout {
            encoding,
            expected: format!("{side}×{side}×{channels}"),
            got: format!("{}×{}×{}", image.height, image.width, image.channels),
        });
    }
    Ok(())
}

pub fn mcrqi_encode(image: &Image) -> Result<QuantumState> {
    expect_channels(image, 3, "MCRQI")?;
    let side = image.square_side("MCRQI")?;
    image.check_range()?;
    let a = address_qubits(side)?;
    let npix = side * side;
    let norm = 0.5 / (npix as f64).sqrt();
    let mut amps = vec![0.0; 8 * npix];
    for (pix, j) in morton_table(side)?.into_iter().enumerate() {
        for sel in 0..4 {
            let x = if sel < 3 { image.data[pix * 3 + sel] } else { 0.0 };
            let (s, c) = (FRAC_PI_2 * x).sin_cos();
            amps[sel * npix + j] = c * norm;
            amps[(4 + sel) * npix + j] = s * norm;
        }
    }
    Ok(QuantumState::from_real(a + 3, &amps)?)
}

pub fn mcrqi_decode(probs: &[f64]) -> Result<Image> {
    let side = split_probs(probs, 8, "MCRQI")?;
    let npix = side * side;
    let mut data = vec![0.0; npix * 3];
    for (pix, j) in morton_table(side)?.into_iter().enumerate() {
        for ch in 0..3 {
            data[pix * 3 + ch] = angle_decode(probs[ch * npix + j], probs[(4 + ch) * npix + j]);
        }
    }
    Image::new(side, side, 3, data)
}

pub fn mcrqi_decode_vjp(probs: &[f64], grad: &Image) -> Result<Vec<f64>> {
    let side = split_probs(probs, 8, "MCRQI")?;
    expect_shape(grad, side, 3, "MCRQI")?;
    let npix = side * side;
    let mut out = vec![0.0; probs.len()];
    for (pix, j) in morton_table(side)?.into_iter().enumerate() {
        for ch in 0..3 {
            let (i0, i1) = (ch * npix + j, (4 + ch) * npix + j);
            let (d0, d1) = angle_decode_grad(probs[i0], probs[i1]);
            out[i0] = grad.data[pix * 3 + ch] * d0;
            out[i1] = grad.data[pix * 3 + ch] * d1;
        }
    }
    Ok(out)
}

pub fn amplitude_encode(image: &Image) -> Result<QuantumState> {
    expect_channels(image, 1, "amplitude encoding")?;
    let side = image.square_side("amplitude encoding")?;
    image.check_range()?;
    let norm = image.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CodecError::ZeroImage);
    }
    let mut amps = vec![0.0; side * side];
    for (pix, j) in morton_table(side)?.into_iter().enumerate() {
        amps[j] = image.data[pix] / norm;
    }
    Ok(QuantumState::from_real(address_qubits(side)?, &amps)?)
}

/// `√p_j` rescaled so the brightest pixel is exactly 1.
pub fn amplitude_decode(probs: &[f64]) -> Result<Image> {
    let side = split_probs(probs, 1, "amplitude encoding")?;
    let (peak, _) = sqrt_peak(probs)?;
    let data = morton_table(side)?
        .into_iter()
        .map(|j| probs[j].sqrt() / peak)
        .collect();
    Image::gray(side, data)
}

fn sqrt_peak(probs: &[f64]) -> Result<(f64, usize)> {
    let mut best = (0.0, 0);
    for (j, &p) in probs.iter().enumerate() {
        if p.sqrt() > best.0 {
            best = (p.sqrt(), j);
        }
    }
    if best.0 == 0.0 {
        return Err(CodecError::ZeroImage);
    }
    Ok(best)
}

pub fn amplitude_decode_vjp(probs: &[f64], grad: &Image) -> Result<Vec<f64>> {
    let side = split_probs(probs, 1, "amplitude encoding")?;
    expect_shape(grad, side, 1, "amplitude encoding")?;
    let (peak, argmax) = sqrt_peak(probs)?;
    // Cotangent on s = √p first, then through the square root.
    let mut ds = vec![0.0; probs.len()];
    for (pix, j) in morton_table(side)?.into_iter().enumerate() {
        let g = grad.data[pix];
        if j == argmax {
            continue;
        }
        let s = probs[j].sqrt();
        ds[j] += g / peak;
        ds[argmax] -= g * s / (peak * peak);
    }
    Ok(ds
        .into_iter()
        .zip(probs)
        .map(|(d, &p)| if p > 0.0 { d / (2.0 * p.sqrt()) } else { 0.0 })
        .collect())
}

/// Bilinear resampling to `new_side`×`new_side` with corner-aligned sample
/// positions: output pixel `i` reads source coordinate `i·(in−1)/(out−1)`.
pub fn bilinear_resize(image: &Image, new_side: usize) -> Result<Image> {
    if new_side == 0 {
        return Err(CodecError::ZeroSize);
    }
    let (h, w, ch) = (image.height, image.width, image.channels);
    if h == 0 || w == 0 {
        return Err(CodecError::ZeroSize);
    }
    let coord = |i: usize, input: usize| -> (usize, usize, f64) {
        if new_side == 1 || input == 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (input - 1) as f64 / (new_side - 1) as f64;
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Image::filled(new_side, new_side, ch, 0.0);
    for r in 0..new_side {
        let (r0, r1, fr) = coord(r, h);
        for c in 0..new_side {
            let (c0, c1, fc) = coord(c, w);
            for k in 0..ch {
                let top = image.get(r0, c0, k) * (1.0 - fc) + image.get(r0, c1, k) * fc;
                let bottom = image.get(r1, c0, k) * (1.0 - fc) + image.get(r1, c1, k) * fc;
                out.set(r, c, k, (top * (1.0 - fr) + bottom * fr).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// 8-bit quantization with round-half-up.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary PGM (one channel) or PPM (three channels).
pub fn write_pnm<W: Write>(image: &Image, mut w: W) -> Result<()> {
    let magic = match image.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(CodecError::Format(format!(
                "PNM export supports 1 or 3 channels, got {c}"
            )))
        }
    };
    write!(w, "{magic}\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image.data.iter().map(|&x| quantize(x)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_pnm<R: BufRead>(mut r: R) -> Result<Image> {
    let mut header = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 4 {
        header.clear();
        if r.read_until(b'\n', &mut header)? == 0 {
            return Err(CodecError::Format("truncated header".into()));
        }
        let line = String::from_utf8_lossy(&header);
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    if tokens.len() > 4 {
        return Err(CodecError::Format("unexpected data after header".into()));
    }
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(CodecError::Format(format!("unsupported magic {m:?}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CodecError::Format(format!("bad header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(CodecError::Format(format!("unsupported maxval {maxval}")));
    }
    let expected = width * height * channels;
    let mut bytes = Vec::with_capacity(expected);
    r.read_to_end(&mut bytes)?;
    if bytes.len() < expected {
        return Err(CodecError::Format(format!(
            "expected {expected} pixel bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[..expected]
        .iter()
        .map(|&b| f64::from(b) / maxval as f64)
        .collect();
    Image::new(height, width, channels, data)
}

/// Lossless `.imgf64` dump: `u32` height, width, channels (little-endian),
/// then the values as little-endian `f64`.
pub fn write_imgf64<W: Write>(image: &Image, mut w: W) -> Result<()> {
    for dim in [image.height, image.width, image.channels] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in &image.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_imgf64<R: Read>(mut r: R) -> Result<Image> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| CodecError::Format("truncated .imgf64 header".into()))?;
    let dim = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != h * w * c * 8 {
        return Err(CodecError::Format(format!(
            "expected {} payload bytes, found {}",
            h * w * c * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Image::new(h, w, c, data)
}
