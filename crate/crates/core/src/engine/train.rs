//! Adversarial training: one generator update then one discriminator update
//! per step, each with its own optimizer.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Model};
use crate::corpus::Utterance;
use crate::error::{io_err, Error, Result};
use crate::generator::variance::padded_values;
use crate::generator::{log_duration_target, pad_mels, PhonemeSequence, VarianceValues};
use crate::nn::{scalar_f64, sequence_mask, Ctx};
use crate::norm::clamp_all_rho;
use crate::objectives::{
    adversarial_loss, discriminator_loss, feature_matching_loss, generator_total_loss, masked_mel_loss, variance_loss,
    GeneratorLossParts, LossWeights,
};
use crate::rng::{randn, stream_rng, Stream};
use crate::schedule::{sample_posterior_batch, sample_training_pair_batch};
use crate::style::{style_classification_loss, StyleFactorConfig};

/// How the style encoder is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    /// Updated with the generator loss plus its classification loss.
    Joint,
    /// Held fixed (for example after separate pre-training); embeddings are constants.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub checkpoint_every: u64,
    pub style_mode: StyleMode,
    pub style_loss_weight: f64,
    /// Classification-only steps for the style encoder before the first
    /// GAN step of a fresh run.
    pub style_pretrain_steps: u64,
    pub style_pretrain_lr: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_steps: 2000,
            batch_size: 8,
            lr_g: 2e-4,
            lr_d: 2e-4,
            betas: [0.5, 0.9],
            eps: 1e-8,
            checkpoint_every: 500,
            style_mode: StyleMode::Joint,
            style_loss_weight: 1.0,
            style_pretrain_steps: 0,
            style_pretrain_lr: 3e-3,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if !(self.style_loss_weight >= 0.0 && self.style_loss_weight.is_finite()) {
            return Err(Error::Config("style_loss_weight must be finite and non-negative".into()));
        }
        if !(self.style_pretrain_lr > 0.0 && self.style_pretrain_lr.is_finite()) {
            return Err(Error::Config("style_pretrain_lr must be finite and positive".into()));
        }
        self.adam_g().validate()?;
        self.adam_d().validate()?;
        self.weights.validate()
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_g, beta1: self.betas[0], beta2: self.betas[1], eps: self.eps }
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_d, ..self.adam_g() }
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed training steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub train: TrainConfig,
}

impl TrainState {
    pub fn new(model: Model, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let opt_g = Adam::new(model.generator_vars(train.style_mode == StyleMode::Joint), train.adam_g())?;
        let opt_d = Adam::new(model.discriminator_vars(), train.adam_d())?;
        let rng = stream_rng(train.seed, Stream::Training);
        Ok(Self { model, opt_g, opt_d, step: 0, rng, train })
    }
}

/// A padded training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ys: Vec<PhonemeSequence>,
    /// `[batch, frames, mel_bins]`.
    pub x0: Tensor,
    pub frame_lengths: Vec<usize>,
    /// `[batch, frames, 1]`.
    pub frame_mask: Tensor,
    pub targets: Vec<VarianceValues>,
    /// `log(1 + d)` per phoneme, `[batch, phonemes]`.
    pub log_duration: Tensor,
    /// `[batch, phonemes]`.
    pub phoneme_mask: Tensor,
    /// Range-normalized frame contours, `[batch, frames]`.
    pub pitch: Tensor,
    pub energy: Tensor,
    pub prompts: Vec<String>,
    pub labels: BTreeMap<String, Vec<Option<usize>>>,
}

impl Batch {
    pub fn new(model: &Model, utts: &[&Utterance]) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let cfg = &model.cfg.generator;
        let (dtype, device) = (model.dtype(), model.device().clone());
        for u in utts {
            u.validate()?;
            if u.mel.bins != cfg.mel_bins {
                return Err(Error::Shape(format!("{}: {} mel bins, model has {}", u.id, u.mel.bins, cfg.mel_bins)));
            }
        }
        let mels: Vec<(&[f32], usize)> = utts.iter().map(|u| (u.mel.data.as_slice(), u.mel.frames)).collect();
        let x0 = pad_mels(&mels, cfg.mel_bins, dtype, &device)?;
        let frame_lengths: Vec<usize> = utts.iter().map(|u| u.frames()).collect();
        let frames = x0.dim(1)?;
        let phonemes = utts.iter().map(|u| u.phonemes.len()).max().unwrap_or(0);
        let phoneme_lengths: Vec<usize> = utts.iter().map(|u| u.phonemes.len()).collect();
        let logd: Vec<Vec<f32>> =
            utts.iter().map(|u| u.durations.iter().map(|&d| log_duration_target(d)).collect()).collect();
        let norm =
            |vals: &[f32], r: crate::generator::Range| vals.iter().map(|&v| r.normalize(v)).collect::<Vec<f32>>();
        let pitch: Vec<Vec<f32>> = utts.iter().map(|u| norm(&u.pitch, cfg.pitch_range)).collect();
        let energy: Vec<Vec<f32>> = utts.iter().map(|u| norm(&u.energy, cfg.energy_range)).collect();
        let factors: &StyleFactorConfig = &model.cfg.style.factors;
        let labels = factors
            .names()
            .map(|n| (n.to_string(), utts.iter().map(|u| u.prompt.labels.get(n).copied()).collect()))
            .collect();
        Ok(Self {
            ys: utts.iter().map(|u| u.phonemes.clone()).collect(),
            x0,
            frame_mask: sequence_mask(&frame_lengths, frames, dtype, &device)?.unsqueeze(2)?,
            frame_lengths,
            targets: utts.iter().map(|u| u.variance()).collect(),
            log_duration: padded_values(&logd, phonemes, dtype, &device)?,
            phoneme_mask: sequence_mask(&phoneme_lengths, phonemes, dtype, &device)?,
            pitch: padded_values(&pitch, frames, dtype, &device)?,
            energy: padded_values(&energy, frames, dtype, &device)?,
            prompts: utts.iter().map(|u| u.prompt.text.clone()).collect(),
            labels,
        })
    }
}

/// Loss values and sampled timesteps of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub timesteps: Vec<usize>,
    pub loss_g: f64,
    pub adv: f64,
    pub fm: f64,
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
    pub style: f64,
    pub loss_d: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

/// Point inside a training step at which an observer is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BeforeGenerator,
    AfterGenerator,
    AfterDiscriminator,
}

/// One `t` per batch item, uniform on `[1, steps]`.
pub fn sample_timesteps(rng: &mut impl Rng, batch: usize, steps: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=steps)).collect()
}

fn finite(term: &str, t: &Tensor, step: u64) -> Result<f64> {
    let value = scalar_f64(t)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { term: term.to_string(), value, step });
    }
    Ok(value)
}

fn mean(t: &Tensor) -> Result<f64> {
    scalar_f64(&t.mean_all()?)
}

pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    train_step_observed(state, batch, &mut |_, _| {})
}

/// [`train_step`] with a callback before and after each half-step.
pub fn train_step_observed(
    state: &mut TrainState,
    batch: &Batch,
    observe: &mut dyn FnMut(Phase, &Model),
) -> Result<StepMetrics> {
    let step = state.step + 1;
    let model = &state.model;
    let sched = &model.schedule;
    let mask = &batch.frame_mask;
    let dims = batch.x0.dims().to_vec();
    let (dtype, device) = (model.dtype(), model.device().clone());
    let rng = &mut state.rng;

    let ts = sample_timesteps(rng, batch.ys.len(), sched.steps());
    let model_ts: Vec<usize> = ts.iter().map(|&t| sched.model_timestep(t)).collect();
    let noise_prev = randn(rng, &dims, dtype, &device)?.broadcast_mul(mask)?;
    let noise_step = randn(rng, &dims, dtype, &device)?.broadcast_mul(mask)?;
    let noise_post = randn(rng, &dims, dtype, &device)?.broadcast_mul(mask)?;
    let (x_prev, x_t) = sample_training_pair_batch(&batch.x0, &ts, sched, &noise_prev, &noise_step)?;

    observe(Phase::BeforeGenerator, model);
    let prompts: Vec<&str> = batch.prompts.iter().map(String::as_str).collect();
    let joint = state.train.style_mode == StyleMode::Joint;
    let s = model.style_embeddings(&prompts)?;
    let s = if joint { s } else { s.detach() };
    let mut ctx = Ctx::train(rng);
    let (x0_pred, cond) = model.generator.forward(&x_t, &batch.ys, &s, &model_ts, Some(&batch.targets), &mut ctx)?;
    let x_prev_fake = sample_posterior_batch(&x0_pred, &x_t, &ts, sched, &noise_post)?.broadcast_mul(mask)?;

    let disc = &model.discriminator;
    let real = disc.forward(&x_prev, &x_t, &batch.frame_lengths, &model_ts, &s)?;
    let fake = disc.forward(&x_prev_fake, &x_t, &batch.frame_lengths, &model_ts, &s)?;
    let real_feats: Vec<Tensor> = real.features.iter().map(Tensor::detach).collect();
    let frame_mask2 = mask.squeeze(2)?;
    let (l_dur, l_pitch, l_energy) = variance_loss(
        &cond.predicted.log_duration,
        &batch.log_duration,
        &batch.phoneme_mask,
        &cond.frame_pitch,
        &batch.pitch,
        &cond.frame_energy,
        &batch.energy,
        &frame_mask2,
    )?;
    let parts = GeneratorLossParts {
        adv: adversarial_loss(&fake.score)?,
        duration: l_dur,
        pitch: l_pitch,
        energy: l_energy,
        fm: feature_matching_loss(&real_feats, &fake.features)?,
        mel: masked_mel_loss(&x0_pred, &batch.x0, mask)?,
    };
    let mut loss_g = generator_total_loss(&parts, &state.train.weights)?;
    let style_loss = if joint {
        let l = style_classification_loss(&model.style.classify(&s)?, &batch.labels)?;
        loss_g = (loss_g + (&l * state.train.style_loss_weight)?)?;
        finite("style", &l, step)?
    } else {
        0.0
    };
    let adv = finite("adv", &parts.adv, step)?;
    let fm = finite("fm", &parts.fm, step)?;
    let mel = finite("mel", &parts.mel, step)?;
    let duration = finite("duration", &parts.duration, step)?;
    let pitch = finite("pitch", &parts.pitch, step)?;
    let energy = finite("energy", &parts.energy, step)?;
    let loss_g_value = finite("loss_g", &loss_g, step)?;
    state.opt_g.step(&loss_g.backward()?)?;
    clamp_all_rho(&model.gen_params)?;
    observe(Phase::AfterGenerator, model);

    let fake_d = disc.forward(&x_prev_fake.detach(), &x_t, &batch.frame_lengths, &model_ts, &s)?;
    let loss_d = discriminator_loss(&real.score, &fake_d.score)?;
    let loss_d_value = finite("loss_d", &loss_d, step)?;
    state.opt_d.step(&loss_d.backward()?)?;
    observe(Phase::AfterDiscriminator, model);

    state.step = step;
    Ok(StepMetrics {
        step,
        timesteps: ts,
        loss_g: loss_g_value,
        adv,
        fm,
        mel,
        duration,
        pitch,
        energy,
        style: style_loss,
        loss_d: loss_d_value,
        d_real: mean(&real.score)?,
        d_fake: mean(&fake_d.score)?,
    })
}

/// Utterance indices for 0-based `step`: consecutive slices of a per-epoch
/// permutation that depends only on `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let epoch = step / per_epoch;
    let k = (step % per_epoch) as usize;
    let mut rng = stream_rng(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), Stream::Shuffle);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm[k * batch_size..((k + 1) * batch_size).min(n)].to_vec()
}

#[derive(Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    #[serde(flatten)]
    metrics: &'a StepMetrics,
    wall_time_s: f64,
}

/// Trains until `state.train.max_steps`. With `run_dir`, appends one JSON
/// line per step to `metrics.log` and writes checkpoints to
/// `checkpoints/step-NNNNNNNN` every `checkpoint_every` steps and at the end.
pub fn fit(mut state: TrainState, data: &[Utterance], run_dir: Option<&Path>) -> Result<FitOutcome> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    state.train.validate()?;
    let mut metrics = Vec::new();
    if state.step >= state.train.max_steps {
        return Ok(FitOutcome { state, metrics });
    }
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(dir))?;
            let path = dir.join("metrics.log");
            Some((OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let start = Instant::now();
    let bs = state.train.batch_size.min(data.len());
    while state.step < state.train.max_steps {
        let idx = batch_indices(state.train.seed, state.step, data.len(), bs);
        let utts: Vec<&Utterance> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::new(&state.model, &utts)?;
        let m = train_step(&mut state, &batch)?;
        if m.step % 100 == 0 {
            log::info!("step {} loss_g {:.4} mel {:.4} loss_d {:.4}", m.step, m.loss_g, m.mel, m.loss_d);
        }
        if let Some((file, path)) = log.as_mut() {
            let rec = LogRecord { metrics: &m, wall_time_s: start.elapsed().as_secs_f64() };
            writeln!(file, "{}", serde_json::to_string(&rec)?).map_err(io_err(path.as_path()))?;
        }
        let done = state.step >= state.train.max_steps;
        if let Some(dir) = run_dir {
            if state.step.is_multiple_of(state.train.checkpoint_every) || done {
                super::save_checkpoint(&state, &checkpoint_dir(dir, state.step))?;
            }
        }
        metrics.push(m);
    }
    Ok(FitOutcome { state, metrics })
}

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> std::path::PathBuf {
    run_dir.join("checkpoints").join(format!("step-{step:08}"))
}

/// Trains only the style encoder on its classification loss.
pub fn pretrain_style(
    model: &Model,
    data: &[Utterance],
    steps: u64,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let vars: Vec<_> =
        model.gen_params.iter().filter(|(n, _)| n.starts_with("style.")).map(|(n, v)| (n.clone(), v.clone())).collect();
    let mut opt = Adam::new(vars, AdamConfig { lr, ..AdamConfig::default() })?;
    let mut losses = Vec::new();
    let bs = batch_size.min(data.len()).max(1);
    for step in 0..steps {
        let idx = batch_indices(seed, step, data.len(), bs);
        let prompts: Vec<&str> = idx.iter().map(|&i| data[i].prompt.text.as_str()).collect();
        let labels = model
            .cfg
            .style
            .factors
            .names()
            .map(|n| (n.to_string(), idx.iter().map(|&i| data[i].prompt.labels.get(n).copied()).collect()))
            .collect();
        let s = model.style_embeddings(&prompts)?;
        let loss = style_classification_loss(&model.style.classify(&s)?, &labels)?;
        losses.push(finite("style", &loss, step + 1)?);
        opt.step(&loss.backward()?)?;
    }
    Ok(losses)
}

const STYLE_PRETRAIN_BATCH: usize = 32;

/// Runs the configured style-encoder pretraining on a fresh state; a state
/// that has already taken GAN steps is left alone.
pub fn warm_start_style(state: &TrainState, data: &[Utterance]) -> Result<Vec<f64>> {
    let t = &state.train;
    if state.step > 0 || t.style_pretrain_steps == 0 {
        return Ok(Vec::new());
    }
    t.validate()?;
    pretrain_style(&state.model, data, t.style_pretrain_steps, STYLE_PRETRAIN_BATCH, t.style_pretrain_lr, t.seed)
}
