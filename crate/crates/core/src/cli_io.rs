//! Datasets, run configuration and image-grid export.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::discriminator::CriticConfig;
use crate::generator::GeneratorConfig;
use crate::image_codec::{bilinear_resize, CodecError, Image};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad IDX magic {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("{path}: truncated IDX file, expected {expected} bytes but found {actual}")]
    Truncated {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset would be empty")]
    Empty,
    #[error("unknown synthetic dataset kind {0:?}")]
    UnknownKind(String),
    #[error("side {0} must be a power of two ≥ 2")]
    BadSide(usize),
    #[error("class filter needs a label file")]
    FilterWithoutLabels,
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Option<Vec<u32>>,
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn need(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    need(path, bytes, 4)?;
    let got = be_u32(bytes, 0);
    if got != expected {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

/// Parses an IDX image file (and optional label file), keeps only the listed
/// classes and optionally resizes every image to `resize`×`resize`.
pub fn load_idx(
    images_path: &Path,
    labels_path: Option<&Path>,
    classes: Option<&[u32]>,
    resize: Option<usize>,
) -> Result<Dataset> {
    let raw = read_file(images_path)?;
    check_magic(images_path, &raw, IDX_IMAGE_MAGIC)?;
    need(images_path, &raw, 16)?;
    let (n, rows, cols) = (
        be_u32(&raw, 4) as usize,
        be_u32(&raw, 8) as usize,
        be_u32(&raw, 12) as usize,
    );
    need(images_path, &raw, 16 + n * rows * cols)?;

    let labels = match labels_path {
        Some(p) => {
            let lraw = read_file(p)?;
            check_magic(p, &lraw, IDX_LABEL_MAGIC)?;
            need(p, &lraw, 8)?;
            let ln = be_u32(&lraw, 4) as usize;
            need(p, &lraw, 8 + ln)?;
            if ln != n {
                return Err(DataError::CountMismatch {
                    images: n,
                    labels: ln,
                });
            }
            Some(lraw[8..8 + ln].iter().map(|&b| u32::from(b)).collect::<Vec<_>>())
        }
        None => None,
    };
    if classes.is_some() && labels.is_none() {
        return Err(DataError::FilterWithoutLabels);
    }

    let mut images = Vec::new();
    let mut kept = Vec::new();
    for i in 0..n {
        if let (Some(cls), Some(lab)) = (classes, &labels) {
            if !cls.contains(&lab[i]) {
                continue;
            }
        }
        let off = 16 + i * rows * cols;
        let data = raw[off..off + rows * cols]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        let mut img = Image::new(rows, cols, 1, data)?;
        if let Some(side) = resize {
            img = bilinear_resize(&img, side)?;
        }
        images.push(img);
        if let Some(lab) = &labels {
            kept.push(lab[i]);
        }
    }
    if images.is_empty() {
        return Err(DataError::Empty);
    }
    let mut provenance = format!("idx:{}", images_path.display());
    if let Some(c) = classes {
        provenance.push_str(&format!(" classes={c:?}"));
    }
    if let Some(s) = resize {
        provenance.push_str(&format!(" resize={s}"));
    }
    Ok(Dataset {
        images,
        labels: labels.map(|_| kept),
        provenance,
    })
}

/// Writes an IDX image file from 8-bit grayscale images.
pub fn write_idx_images(path: &Path, images: &[Image]) -> std::io::Result<()> {
    let (rows, cols) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend(img.data().iter().map(|&x| crate::image_codec::quantize(x)));
    }
    fs::write(path, out)
}

pub fn write_idx_labels(path: &Path, labels: &[u32]) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    fs::write(path, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// One bright quadrant on black.
    Quadrant,
    /// Two patterns, a bright frame and a bright central bar, so several
    /// pixels (the center among them) are either near 0 or near 1.
    TwoPattern,
    /// Horizontal or vertical stripes of period two.
    Bars,
}

impl std::str::FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadrant" => Ok(Self::Quadrant),
            "two_pattern" | "two-pattern" | "bimodal" => Ok(Self::TwoPattern),
            "bars" | "stripes" => Ok(Self::Bars),
            other => Err(DataError::UnknownKind(other.to_owned())),
        }
    }
}

/// Largest deviation from 0 or 1 in the two-pattern images.
pub const TWO_PATTERN_JITTER: f64 = 0.1;

pub fn make_synthetic<R: Rng + ?Sized>(
    kind: SyntheticKind,
    side: usize,
    count: usize,
    rng: &mut R,
) -> Result<Dataset> {
    if side < 2 || !side.is_power_of_two() {
        return Err(DataError::BadSide(side));
    }
    if count == 0 {
        return Err(DataError::Empty);
    }
    let half = side / 2;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut img = Image::filled(side, side, 1, 0.0);
        let label = match kind {
            SyntheticKind::Quadrant => {
                let q = rng.random_range(0..4u32);
                let (r0, c0) = ((q as usize / 2) * half, (q as usize % 2) * half);
                for r in r0..r0 + half {
                    for c in c0..c0 + half {
                        img.set(r, c, 0, 1.0);
                    }
                }
                q
            }
            SyntheticKind::TwoPattern => {
                let which = rng.random_range(0..2u32);
                let bar_lo = half.saturating_sub(1).max(1).min(side - 1);
                for r in 0..side {
                    for c in 0..side {
                        let bright = if which == 0 {
                            r == 0 || c == 0 || r == side - 1 || c == side - 1
                        } else {
                            (bar_lo..=half).contains(&c)
                        };
                        let jitter = rng.random::<f64>() * TWO_PATTERN_JITTER;
                        img.set(r, c, 0, if bright { 1.0 - jitter } else { jitter });
                    }
                }
                which
            }
            SyntheticKind::Bars => {
                let vertical = rng.random::<bool>();
                let phase = rng.random_range(0..2usize);
                for r in 0..side {
                    for c in 0..side {
                        let k = if vertical { c } else { r };
                        if (k + phase) % 2 == 0 {
                            img.set(r, c, 0, 1.0);
                        }
                    }
                }
                u32::from(vertical) * 2 + phase as u32
            }
        };
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels: Some(labels),
        provenance: format!("synthetic:{kind:?} side={side} count={count}"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub kind: SyntheticKind,
    pub count: usize,
    /// Seed of the synthetic dataset, independent of the training seed.
    pub seed: u64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub classes: Option<Vec<u32>>,
    pub resize: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            kind: SyntheticKind::TwoPattern,
            count: 512,
            seed: 0,
            images: None,
            labels: None,
            classes: None,
            resize: None,
        }
    }
}

impl DatasetConfig {
    /// Relative paths are resolved against `base`.
    pub fn load(&self, side: usize, base: &Path) -> Result<Dataset> {
        match self.source {
            DatasetSource::Synthetic => {
                let mut rng = crate::rng(self.seed);
                make_synthetic(self.kind, side, self.count, &mut rng)
            }
            DatasetSource::Idx => {
                let images = self
                    .images
                    .as_ref()
                    .ok_or_else(|| DataError::Config("dataset.images is required for IDX input".into()))?;
                let labels = self.labels.as_ref().map(|p| base.join(p));
                load_idx(
                    &base.join(images),
                    labels.as_deref(),
                    self.classes.as_deref(),
                    self.resize,
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub entropy_draws: usize,
    pub entropy_subsets: Vec<Vec<usize>>,
    pub pca_samples: usize,
    pub grad_batch: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            entropy_draws: 64,
            entropy_subsets: vec![vec![0]],
            pca_samples: 256,
            grad_batch: 16,
        }
    }
}

/// Everything that defines an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        Self {
            critic: CriticConfig::desk(generator.side, generator.encoding.channels()),
            generator,
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&compact))
    }
}

/// Tiles images (all the same shape) into a grid `columns` wide with a
/// one-pixel gap of value `gap`.
pub fn image_grid(images: &[Image], columns: usize, gap: f64) -> Result<Image> {
    let first = images.first().ok_or(DataError::Empty)?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let columns = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(columns);
    let gh = rows * h + rows - 1;
    let gw = columns * w + columns - 1;
    let mut grid = Image::filled(gh, gw, c, gap);
    for (i, img) in images.iter().enumerate() {
        if (img.height(), img.width(), img.channels()) != (h, w, c) {
            return Err(DataError::Config("grid images differ in shape".into()));
        }
        let (r0, c0) = ((i / columns) * (h + 1), (i % columns) * (w + 1));
        for r in 0..h {
            for col in 0..w {
                for k in 0..c {
                    grid.set(r0 + r, c0 + col, k, img.get(r, col, k));
                }
            }
        }
    }
    Ok(grid)
}
