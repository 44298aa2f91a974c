//! WGAN-GP training of a quantum generator against a convolutional critic.
//!
//! All randomness of a run comes from one ChaCha20 stream seeded by
//! [`TrainConfig::seed`], consumed in a fixed order:
//!
//! 1. generator initialization, then critic initialization;
//! 2. per critic update: real-batch indices, fake-batch noise draws (then
//!    shot samples, if enabled), interpolation coefficients;
//! 3. per generator update: fake-batch noise draws (then shot samples).
//!
//! MMD evaluations use a separate stream that is re-created for every
//! evaluation, so they never perturb training and every checkpoint is scored
//! against the same reference draws.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{DiffError, Tape, Tensor};
use crate::discriminator::{CriticConfig, CriticError, CriticNetwork};
use crate::generator::{
    backprop_batch, generate_batch, GeneratedSample, GeneratorConfig, GeneratorError,
    GeneratorParams, LAYOUT_VERSION,
};
use crate::image_codec::Image;
use crate::metrics::{mmd_report, MetricsError, MmdReport};

pub const CHECKPOINT_VERSION: u32 = 1;
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("real and fake batches differ in size ({real} vs {fake})")]
    BatchMismatch { real: usize, fake: usize },
    #[error("dataset images are {got}, generator produces {expected}")]
    DatasetShape { expected: String, got: String },
    #[error("non-finite {what} at iteration {iteration}{}", .checkpoint.as_ref().map(|p| format!(" (diagnostic checkpoint at {})", p.display())).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        iteration: usize,
        checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda: f64,
    pub n_critic: usize,
    pub iterations: usize,
    /// Standard deviation of the layer-angle initialization; noise-tuning
    /// entries use a tenth of it.
    pub init_std: f64,
    /// Measurement shots per generated image; `None` uses exact probabilities.
    pub shots: Option<u64>,
    pub checkpoint_interval: usize,
    /// Samples per side for checkpoint MMD; `0` disables evaluation.
    pub mmd_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_generator: 0.0025,
            lr_critic: 0.00025,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            lambda: 10.0,
            n_critic: 10,
            iterations: 1000,
            init_std: 0.1,
            shots: None,
            checkpoint_interval: 500,
            mmd_samples: 512,
            seed: 0,
        }
    }
}

/// Learning rates considered in the preset grid.
pub const LR_PRESETS: [f64; 3] = [0.001, 0.0025, 0.01];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be positive");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be positive");
        }
        if self.shots == Some(0) {
            return bad("shots must be positive when set");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Bias-corrected Adam state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// `−mean(scores)`.
pub fn generator_loss(scores: &[f64]) -> f64 {
    -scores.iter().sum::<f64>() / scores.len() as f64
}

/// Generator loss and its gradient with respect to each fake image.
pub fn generator_image_grads(critic: &CriticNetwork, fake: &[Image]) -> std::result::Result<(f64, Vec<Image>), CriticError> {
    let tape = Tape::new();
    let w = critic.bind(&tape, false);
    let x = tape.var(critic.batch_tensor(fake)?);
    let loss = critic.apply(&w, x)?.mean()?.scale(-1.0)?;
    let g = tape.gradient(loss, &[x])?[0];
    Ok((loss.item(), critic.tensor_images(&g.value())?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticLoss {
    pub loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
    /// Gradient for each critic parameter tensor, in storage order.
    pub grads: Vec<Tensor>,
}

/// Penalized critic loss with explicit interpolation coefficients `u`:
/// `mean D(fake) − mean D(real) + λ·mean (‖∇D(x̂)‖ − 1)²`,
/// `x̂ᵢ = uᵢ·realᵢ + (1−uᵢ)·fakeᵢ`.
pub fn critic_loss_with(
    critic: &CriticNetwork,
    real: &[Image],
    fake: &[Image],
    lambda: f64,
    u: &[f64],
) -> Result<CriticLoss> {
    if real.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if real.len() != fake.len() || u.len() != real.len() {
        return Err(TrainError::BatchMismatch {
            real: real.len(),
            fake: fake.len(),
        });
    }
    let tape = Tape::new();
    let w = critic.bind(&tape, true);
    let xr = critic.batch_tensor(real)?;
    let xf = critic.batch_tensor(fake)?;
    let per = xr.numel() / real.len();
    let mut hat = xr.clone();
    for (i, chunk) in hat.data_mut().chunks_mut(per).enumerate() {
        let f = &xf.data()[i * per..(i + 1) * per];
        for (h, fv) in chunk.iter_mut().zip(f) {
            *h = u[i] * *h + (1.0 - u[i]) * fv;
        }
    }
    let d_real = critic.apply(&w, tape.constant(xr))?.mean()?;
    let d_fake = critic.apply(&w, tape.constant(xf))?.mean()?;
    let xhat = tape.var(hat);
    let d_hat = critic.apply(&w, xhat)?.sum()?;
    let gx = tape.gradient(d_hat, &[xhat])?[0];
    let norms = gx.mul(gx)?.sum_rows()?.sqrt()?;
    let dev = norms.add_const(-1.0)?;
    let penalty = dev.mul(dev)?.mean()?;
    let wasserstein = d_fake.sub(d_real)?;
    let loss = wasserstein.add(penalty.scale(lambda)?)?;
    let grads = tape
        .gradient(loss, &w)?
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect();
    Ok(CriticLoss {
        loss: loss.item(),
        wasserstein: wasserstein.item(),
        penalty: penalty.item(),
        grads,
    })
}

/// [`critic_loss_with`] drawing one `u ~ U[0,1]` per pair from `rng`.
pub fn critic_loss<R: Rng + ?Sized>(
    critic: &CriticNetwork,
    real: &[Image],
    fake: &[Image],
    lambda: f64,
    rng: &mut R,
) -> Result<CriticLoss> {
    let u: Vec<f64> = (0..real.len()).map(|_| rng.random::<f64>()).collect();
    critic_loss_with(critic, real, fake, lambda, &u)
}

fn flatten(tensors: &[Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn scatter(flat: &[f64], tensors: &mut [Tensor]) {
    let mut off = 0;
    for t in tensors {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Losses reported after one generator iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub loss_g: f64,
    pub loss_d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub losses: Option<StepLosses>,
    pub mmd: Option<MmdReport>,
}

pub const LOG_HEADER: &str = "iteration,loss_g,loss_d,mmd_linear,mmd_poly,mmd_rbf";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            opt(self.losses.map(|l| l.loss_g)),
            opt(self.losses.map(|l| l.loss_d)),
            opt(self.mmd.map(|m| m.linear)),
            opt(self.mmd.map(|m| m.poly)),
            opt(self.mmd.map(|m| m.rbf)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricLog {
    pub rows: Vec<LogRow>,
}

impl MetricLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    /// Rows that carry an MMD evaluation.
    pub fn checkpoints(&self) -> impl Iterator<Item = (usize, &MmdReport)> {
        self.rows
            .iter()
            .filter_map(|r| r.mmd.as_ref().map(|m| (r.iteration, m)))
    }
}

/// Complete training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub generator: GeneratorConfig,
    pub params: GeneratorParams,
    pub critic: CriticNetwork,
    pub config: TrainConfig,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub iteration: usize,
    pub critic_updates: usize,
    pub config_hash: Option<String>,
    rng: ChaCha20Rng,
}

impl Trainer {
    pub fn new(generator: GeneratorConfig, critic: CriticConfig, config: TrainConfig) -> Result<Self> {
        generator.validate()?;
        config.validate()?;
        let expected_side = generator.side;
        if critic.side != expected_side || critic.channels != generator.encoding.channels() {
            return Err(TrainError::Config(format!(
                "critic input {}×{}×{} does not match generator output {}×{}×{}",
                critic.side,
                critic.side,
                critic.channels,
                expected_side,
                expected_side,
                generator.encoding.channels()
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let params = GeneratorParams::init(&generator, config.init_std, &mut rng);
        let critic = CriticNetwork::init(critic, &mut rng)?;
        Ok(Self {
            adam_g: Adam::new(params.len()),
            adam_d: Adam::new(critic.param_count()),
            generator,
            params,
            critic,
            config,
            iteration: 0,
            critic_updates: 0,
            config_hash: None,
            rng,
        })
    }

    pub fn rng(&self) -> &ChaCha20Rng {
        &self.rng
    }

    fn check_dataset(&self, data: &[Image]) -> Result<()> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let s = self.generator.side;
        let c = self.generator.encoding.channels();
        for img in data {
            if img.height() != s || img.width() != s || img.channels() != c {
                return Err(TrainError::DatasetShape {
                    expected: format!("{s}×{s}×{c}"),
                    got: format!("{}×{}×{}", img.height(), img.width(), img.channels()),
                });
            }
        }
        Ok(())
    }

    fn fake_batch(&mut self) -> Result<Vec<GeneratedSample>> {
        Ok(generate_batch(
            &self.generator,
            &self.params,
            self.config.batch_size,
            self.config.shots,
            &mut self.rng,
        )?)
    }

    fn real_batch(&mut self, data: &[Image]) -> Vec<Image> {
        (0..self.config.batch_size)
            .map(|_| data[self.rng.random_range(0..data.len())].clone())
            .collect()
    }

    /// One critic update on fresh batches; returns the critic loss.
    pub fn critic_step(&mut self, data: &[Image]) -> Result<f64> {
        let real = self.real_batch(data);
        let fake: Vec<Image> = self.fake_batch()?.into_iter().map(|s| s.image).collect();
        let out = critic_loss(&self.critic, &real, &fake, self.config.lambda, &mut self.rng)?;
        if !out.loss.is_finite() {
            return Err(self.non_finite("critic loss"));
        }
        let mut flat = flatten(self.critic.params());
        let grads = flatten(&out.grads);
        let c = &self.config;
        self.adam_d.step(&mut flat, &grads, c.lr_critic, c.beta1, c.beta2, c.eps);
        scatter(&flat, self.critic.params_mut());
        self.critic_updates += 1;
        Ok(out.loss)
    }

    /// One generator update; returns the generator loss.
    pub fn generator_step(&mut self) -> Result<f64> {
        let samples = self.fake_batch()?;
        let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        let (loss, image_grads) = generator_image_grads(&self.critic, &images)?;
        if !loss.is_finite() {
            return Err(self.non_finite("generator loss"));
        }
        let grads = backprop_batch(&self.generator, &self.params, &samples, &image_grads)?;
        let c = &self.config;
        self.adam_g
            .step(self.params.values_mut(), &grads, c.lr_generator, c.beta1, c.beta2, c.eps);
        Ok(loss)
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn step(&mut self, data: &[Image]) -> Result<StepLosses> {
        self.check_dataset(data)?;
        let mut loss_d = f64::NAN;
        for _ in 0..self.config.n_critic {
            loss_d = self.critic_step(data)?;
        }
        let loss_g = self.generator_step()?;
        self.iteration += 1;
        Ok(StepLosses { loss_g, loss_d })
    }

    fn non_finite(&self, what: &'static str) -> TrainError {
        TrainError::NonFinite {
            what,
            iteration: self.iteration,
            checkpoint: None,
        }
    }

    /// MMD between `k` generated images and `k` dataset images drawn with
    /// replacement, all from the dedicated evaluation stream.
    pub fn evaluate_mmd(&self, data: &[Image], k: usize) -> Result<MmdReport> {
        self.check_dataset(data)?;
        let mut rng = ChaCha20Rng::seed_from_u64(self.config.seed);
        rng.set_stream(EVAL_STREAM);
        let real: Vec<Vec<f64>> = (0..k)
            .map(|_| data[rng.random_range(0..data.len())].data().to_vec())
            .collect();
        let fake: Vec<Vec<f64>> = generate_batch(&self.generator, &self.params, k, self.config.shots, &mut rng)?
            .into_iter()
            .map(|s| s.image.into_data())
            .collect();
        Ok(mmd_report(&fake, &real)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layout_version: LAYOUT_VERSION,
            iteration: self.iteration,
            critic_updates: self.critic_updates,
            generator: self.generator.clone(),
            critic_config: self.critic.config().clone(),
            train: self.config.clone(),
            config_hash: self.config_hash.clone(),
            rng: RngState::capture(&self.rng),
            params: self.params.values().to_vec(),
            critic_params: self.critic.params().to_vec(),
            adam_g: self.adam_g.clone(),
            adam_d: self.adam_d.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let params = GeneratorParams::from_vec(&ck.generator, ck.params)?;
        let critic = CriticNetwork::from_params(ck.critic_config, ck.critic_params)?;
        if ck.adam_g.m.len() != params.len() || ck.adam_d.m.len() != critic.param_count() {
            return Err(TrainError::Checkpoint("optimizer state size mismatch".into()));
        }
        Ok(Self {
            generator: ck.generator,
            params,
            critic,
            config: ck.train,
            adam_g: ck.adam_g,
            adam_d: ck.adam_d,
            iteration: ck.iteration,
            critic_updates: ck.critic_updates,
            config_hash: ck.config_hash,
            rng: ck.rng.restore()?,
        })
    }
}

/// Runs until `config.iterations` generator updates have been made. MMD is
/// evaluated (and, with `out_dir`, a checkpoint written) at iteration 0 when
/// starting fresh and every `checkpoint_interval` iterations after that.
pub fn train(trainer: &mut Trainer, data: &[Image], out_dir: Option<&Path>) -> Result<MetricLog> {
    let mut log = MetricLog::default();
    train_with(trainer, data, out_dir, |row| log.rows.push(row.clone()))?;
    Ok(log)
}

/// [`train`] handing each log row to `on_row` as soon as it is complete,
/// before the matching checkpoint is written.
pub fn train_with(
    trainer: &mut Trainer,
    data: &[Image],
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<()> {
    trainer.check_dataset(data)?;
    let interval = trainer.config.checkpoint_interval;
    if trainer.iteration == 0 {
        on_row(&LogRow {
            iteration: 0,
            losses: None,
            mmd: evaluate(trainer, data)?,
        });
        if let Some(dir) = out_dir {
            trainer.checkpoint().save(&checkpoint_dir(dir, 0))?;
        }
    }
    while trainer.iteration < trainer.config.iterations {
        let losses = match trainer.step(data) {
            Ok(l) => l,
            Err(TrainError::NonFinite { what, iteration, .. }) => {
                let checkpoint = match out_dir {
                    Some(dir) => {
                        let path = dir.join(format!("diagnostic_{iteration:06}"));
                        trainer.checkpoint().save(&path)?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(TrainError::NonFinite {
                    what,
                    iteration,
                    checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        let at_checkpoint = trainer.iteration.is_multiple_of(interval);
        on_row(&LogRow {
            iteration: trainer.iteration,
            losses: Some(losses),
            mmd: if at_checkpoint { evaluate(trainer, data)? } else { None },
        });
        if at_checkpoint {
            if let Some(dir) = out_dir {
                trainer.checkpoint().save(&checkpoint_dir(dir, trainer.iteration))?;
            }
        }
    }
    Ok(())
}

fn evaluate(trainer: &Trainer, data: &[Image]) -> Result<Option<MmdReport>> {
    match trainer.config.mmd_samples {
        0 => Ok(None),
        k => trainer.evaluate_mmd(data, k).map(Some),
    }
}

pub fn checkpoint_dir(root: &Path, iteration: usize) -> PathBuf {
    root.join(format!("ckpt_{iteration:06}"))
}

/// Serializable ChaCha20 position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream().to_string(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha20Rng> {
        let bad = |what: &str| TrainError::Checkpoint(format!("invalid RNG {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha20Rng::from_seed(seed);
        rng.set_stream(self.stream.parse().map_err(|_| bad("stream"))?);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// Everything needed to resume a run bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub layout_version: u32,
    pub iteration: usize,
    pub critic_updates: usize,
    pub generator: GeneratorConfig,
    pub critic_config: CriticConfig,
    pub train: TrainConfig,
    pub config_hash: Option<String>,
    pub rng: RngState,
    pub params: Vec<f64>,
    pub critic_params: Vec<Tensor>,
    pub adam_g: Adam,
    pub adam_d: Adam,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    layout_version: u32,
    iteration: usize,
    critic_updates: usize,
    generator: GeneratorConfig,
    critic: CriticConfig,
    train: TrainConfig,
    config_hash: Option<String>,
    rng: RngState,
    adam_generator_step: u64,
    adam_critic_step: u64,
    arrays: Vec<ArrayEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARRAYS_FILE: &str = "arrays.f64";

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("generator.params".into(), vec![self.params.len()], &self.params),
            ("adam_generator.m".into(), vec![self.adam_g.m.len()], &self.adam_g.m),
            ("adam_generator.v".into(), vec![self.adam_g.v.len()], &self.adam_g.v),
        ];
        for ((name, _), t) in self.critic_config.param_shapes().into_iter().zip(&self.critic_params) {
            out.push((format!("critic.{name}"), t.shape().to_vec(), t.data()));
        }
        out.push(("adam_critic.m".into(), vec![self.adam_d.m.len()], &self.adam_d.m));
        out.push(("adam_critic.v".into(), vec![self.adam_d.v.len()], &self.adam_d.v));
        out
    }

    /// Manifest JSON and binary payload.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, shape, data) in self.arrays() {
            entries.push(ArrayEntry {
                name,
                shape,
                offset,
            });
            offset += data.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            version: self.version,
            layout_version: self.layout_version,
            iteration: self.iteration,
            critic_updates: self.critic_updates,
            generator: self.generator.clone(),
            critic: self.critic_config.clone(),
            train: self.train.clone(),
            config_hash: self.config_hash.clone(),
            rng: self.rng.clone(),
            adam_generator_step: self.adam_g.t,
            adam_critic_step: self.adam_d.t,
            arrays: entries,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        Ok((json, payload))
    }

    pub fn from_bytes(manifest: &[u8], payload: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(manifest)?;
        if m.version != CHECKPOINT_VERSION || m.layout_version != LAYOUT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "unsupported version {} (layout {})",
                m.version, m.layout_version
            )));
        }
        if !payload.len().is_multiple_of(8) {
            return Err(TrainError::Checkpoint("payload length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let e = m
                .arrays
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array {name}")))?;
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| TrainError::Checkpoint(format!("array {name} exceeds payload")))?;
            Ok((e.shape.clone(), data.to_vec()))
        };
        let params = take("generator.params")?.1;
        let adam_g = Adam {
            m: take("adam_generator.m")?.1,
            v: take("adam_generator.v")?.1,
            t: m.adam_generator_step,
        };
        let adam_d = Adam {
            m: take("adam_critic.m")?.1,
            v: take("adam_critic.v")?.1,
            t: m.adam_critic_step,
        };
        let critic_params = m
            .critic
            .param_shapes()
            .into_iter()
            .map(|(name, _)| {
                let (shape, data) = take(&format!("critic.{name}"))?;
                Ok(Tensor::new(shape, data)?)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            version: m.version,
            layout_version: m.layout_version,
            iteration: m.iteration,
            critic_updates: m.critic_updates,
            generator: m.generator,
            critic_config: m.critic,
            train: m.train,
            config_hash: m.config_hash,
            rng: m.rng,
            params,
            critic_params,
            adam_g,
            adam_d,
        })
    }

    /// Writes into a temporary sibling directory and renames it into place,
    /// so a crash never leaves a half-written checkpoint at `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (manifest, payload) = self.to_bytes()?;
        let name = dir
            .file_name()
            .ok_or_else(|| TrainError::Checkpoint(format!("bad checkpoint path {}", dir.display())))?;
        let parent = dir.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{}.tmp", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp)?;
        fs::write(tmp.join(MANIFEST_FILE), manifest)?;
        fs::write(tmp.join(ARRAYS_FILE), payload)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read(dir.join(MANIFEST_FILE))?;
        let payload = fs::read(dir.join(ARRAYS_FILE))?;
        Self::from_bytes(&manifest, &payload)
    }
}

/// Checkpoint directories under `root`, ordered by iteration.
pub fn list_checkpoints(root: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(it) = name.strip_prefix("ckpt_").and_then(|s| s.parse().ok()) {
            if path.join(MANIFEST_FILE).exists() {
                out.push((it, path));
            }
        }
    }
    out.sort();
    Ok(out)
}
