//! Time- and style-conditioned 1-D conv critic `D(x_{t-1}, x_t, t, s)`.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sequence_mask, timestep_encoding, Builder, Conv1d, Init, Linear};
use crate::style::STYLE_DIM;

const TIMESTEP_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
    pub mel_bins: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 64, 32, 1],
            kernels: vec![3, 5, 5, 5, 3],
            strides: vec![1, 2, 2, 1, 1],
            leaky_slope: 0.2,
            mel_bins: 80,
        }
    }

    pub fn full() -> Self {
        Self { channels: vec![64, 128, 512, 128, 1], ..Self::desk() }
    }

    pub fn micro() -> Self {
        Self { channels: vec![4, 4, 1], kernels: vec![3, 3, 3], strides: vec![1, 2, 1], leaky_slope: 0.2, mel_bins: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n < 2 {
            return Err(Error::Config("discriminator needs at least two conv layers".into()));
        }
        if self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "discriminator has {n} channels but {} kernels and {} strides",
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.channels[n - 1] != 1 {
            return Err(Error::Config("last discriminator layer must have one channel".into()));
        }
        if self.strides[n - 1] != 1 {
            return Err(Error::Config("last discriminator layer must have stride 1".into()));
        }
        let all = self.channels.iter().chain(&self.kernels).chain(&self.strides);
        if all.copied().any(|v| v == 0) || self.mel_bins == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// `[batch, positions]`.
    pub uncond_logit: Tensor,
    /// `[batch, positions]`.
    pub cond_logit: Tensor,
    /// Per-layer activations, first layer first; the last entry is the
    /// unconditional logit map `[batch, positions, 1]`.
    pub features: Vec<Tensor>,
    /// Valid-position mask of the logit maps, `[batch, positions]`.
    pub mask: Tensor,
    /// Per-item critic value: masked mean of `(uncond + cond) / 2`, `[batch]`.
    pub score: Tensor,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    time_proj: Linear,
    convs: Vec<Conv1d>,
    style_proj: Linear,
}

impl Discriminator {
    pub fn new(b: &mut Builder, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut in_ch = 2 * cfg.mel_bins;
        for (i, ((&c, &k), &st)) in cfg.channels.iter().zip(&cfg.kernels).zip(&cfg.strides).enumerate() {
            convs.push(Conv1d::new(&mut b.pp(format!("conv{i}")), in_ch, c, k, st, 1)?);
            in_ch = c;
        }
        let trunk = cfg.channels[cfg.channels.len() - 2];
        Ok(Self {
            cfg: cfg.clone(),
            time_proj: Linear::new(&mut b.pp("time_proj"), TIMESTEP_DIM, 2 * cfg.mel_bins, true)?,
            convs,
            style_proj: Linear::with_init(
                &mut b.pp("style_proj"),
                STYLE_DIM,
                trunk,
                Init::Normal { std: 1.0 / ((STYLE_DIM * trunk) as f64).sqrt() },
                None,
            )?,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.convs.len()
    }

    /// `x_prev`, `x_t`: `[batch, frames, mel_bins]`; `lengths`: valid frames per
    /// item; `ts`: model timestep per item; `s`: `[batch, 128]`, treated as a
    /// constant input.
    pub fn forward(
        &self,
        x_prev: &Tensor,
        x_t: &Tensor,
        lengths: &[usize],
        ts: &[usize],
        s: &Tensor,
    ) -> Result<DiscriminatorOutput> {
        if x_prev.dims() != x_t.dims() {
            return Err(Error::Shape(format!("x_prev {:?} vs x_t {:?}", x_prev.dims(), x_t.dims())));
        }
        let (b, frames, bins) = x_t.dims3()?;
        if bins != self.cfg.mel_bins {
            return Err(Error::Shape(format!("discriminator expects {} bins, got {bins}", self.cfg.mel_bins)));
        }
        if lengths.len() != b || ts.len() != b {
            return Err(Error::Shape(format!("batch {b} with {} lengths and {} timesteps", lengths.len(), ts.len())));
        }
        if lengths.iter().any(|&n| n == 0 || n > frames) {
            return Err(Error::Shape(format!("invalid lengths {lengths:?} for {frames} frames")));
        }
        let dtype = x_t.dtype();
        let device = x_t.device();
        let temb = self.time_proj.forward(&timestep_encoding(ts, TIMESTEP_DIM, dtype, device)?)?;
        let mut lens = lengths.to_vec();
        let mask_of = |lens: &[usize], len: usize| -> Result<Tensor> { sequence_mask(lens, len, dtype, device) };
        let mut mask = mask_of(&lens, frames)?;
        let mut h =
            Tensor::cat(&[x_prev, x_t], 2)?.broadcast_add(&temb.unsqueeze(1)?)?.broadcast_mul(&mask.unsqueeze(2)?)?;
        let mut features = Vec::with_capacity(self.convs.len());
        let last = self.convs.len() - 1;
        let mut trunk = None;
        for (i, conv) in self.convs.iter().enumerate() {
            if conv.output_len(h.dim(1)?) == 0 {
                return Err(Error::Shape(format!("{frames} frames too short for the discriminator")));
            }
            let y = conv.forward(&h)?;
            lens = lens.iter().map(|&n| conv.output_len(n).max(1)).collect();
            mask = mask_of(&lens, y.dim(1)?)?;
            let y = if i < last { leaky_relu(&y, self.cfg.leaky_slope)? } else { y };
            h = y.broadcast_mul(&mask.unsqueeze(2)?)?;
            if i + 1 == last {
                trunk = Some(h.clone());
            }
            features.push(h.clone());
        }
        let trunk = trunk.expect("at least two layers");
        let uncond_logit = h.squeeze(2)?;
        let proj = self.style_proj.forward(&s.detach())?.unsqueeze(1)?;
        let cond_logit = trunk.broadcast_mul(&proj)?.sum(D::Minus1)?.broadcast_mul(&mask)?;
        let counts = mask.sum(1)?;
        let score = ((&uncond_logit + &cond_logit)? * 0.5)?.sum(1)?.div(&counts)?;
        Ok(DiscriminatorOutput { uncond_logit, cond_logit, features, mask, score })
    }
}
