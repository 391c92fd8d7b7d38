//! Variance adaptor pieces: duration/pitch/energy predictors, the length
//! regulator and value quantization for the pitch/energy embeddings.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv1d, Ctx, LayerNorm, Linear};

/// Per-utterance duration, pitch and energy values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceValues {
    /// Frames per phoneme.
    pub durations: Vec<u32>,
    /// Per-frame pitch contour.
    pub pitch: Vec<f32>,
    /// Per-frame energy.
    pub energy: Vec<f32>,
}

impl VarianceValues {
    pub fn frames(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    pub fn validate(&self, phonemes: usize) -> Result<()> {
        if self.durations.len() != phonemes {
            return Err(Error::Shape(format!("{} durations for {phonemes} phonemes", self.durations.len())));
        }
        let f = self.frames();
        if self.pitch.len() != f || self.energy.len() != f {
            return Err(Error::Shape(format!(
                "durations sum to {f} frames but pitch has {} and energy {}",
                self.pitch.len(),
                self.energy.len()
            )));
        }
        if self.energy.iter().any(|e| *e < 0.0) {
            return Err(Error::Input("energy must be non-negative".into()));
        }
        Ok(())
    }
}

/// Predictor outputs per phoneme, `[batch, phonemes]`. Durations are in the
/// `log(1 + frames)` domain; pitch and energy are range-normalized.
#[derive(Debug, Clone)]
pub struct PredictedVariances {
    pub log_duration: Tensor,
    pub pitch: Tensor,
    pub energy: Tensor,
}

/// Conv1D → ReLU → LayerNorm → dropout, twice, then a scalar projection.
#[derive(Debug, Clone)]
pub struct VariancePredictor {
    conv1: Conv1d,
    ln1: LayerNorm,
    conv2: Conv1d,
    ln2: LayerNorm,
    out: Linear,
    dropout: f64,
}

impl VariancePredictor {
    pub fn new(b: &mut Builder, hidden: usize, filter: usize, kernel: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            conv1: Conv1d::new(&mut b.pp("conv1"), hidden, filter, kernel, 1, 1)?,
            ln1: LayerNorm::new(&mut b.pp("ln1"), filter)?,
            conv2: Conv1d::new(&mut b.pp("conv2"), filter, filter, kernel, 1, 1)?,
            ln2: LayerNorm::new(&mut b.pp("ln2"), filter)?,
            out: Linear::new(&mut b.pp("out"), filter, 1, true)?,
            dropout,
        })
    }

    /// `h`: `[batch, len, hidden]`, `mask`: `[batch, len, 1]` → `[batch, len]`.
    pub fn forward(&self, h: &Tensor, mask: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let x = self.ln1.forward(&self.conv1.forward(h)?.relu()?)?;
        let x = ctx.dropout(&x, self.dropout)?.broadcast_mul(mask)?;
        let x = self.ln2.forward(&self.conv2.forward(&x)?.relu()?)?;
        let x = ctx.dropout(&x, self.dropout)?.broadcast_mul(mask)?;
        Ok(self.out.forward(&x)?.broadcast_mul(mask)?.squeeze(2)?)
    }
}

/// Expansion matrix `[batch, frames, phonemes]` and per-item frame counts.
fn expansion(durations: &[Vec<u32>], phonemes: usize) -> Result<(Vec<f32>, usize, Vec<usize>)> {
    let lens: Vec<usize> = durations.iter().map(|d| d.iter().map(|&x| x as usize).sum()).collect();
    if let Some(i) = lens.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("item {i}: all durations are zero")));
    }
    let frames = lens.iter().copied().max().unwrap_or(0);
    let mut a = vec![0f32; durations.len() * frames * phonemes];
    for (b, d) in durations.iter().enumerate() {
        if d.len() > phonemes {
            return Err(Error::Shape(format!("{} durations for {phonemes} phoneme rows", d.len())));
        }
        let mut f = 0;
        for (p, &n) in d.iter().enumerate() {
            for _ in 0..n {
                a[(b * frames + f) * phonemes + p] = 1.0;
                f += 1;
            }
        }
    }
    Ok((a, frames, lens))
}

/// Repeats row `i` of each item `durations[i]` times. `h` is
/// `[batch, phonemes, channels]` (or `[batch, phonemes]`); returns the
/// frame-level tensor padded to the longest item, plus per-item frame counts.
pub fn length_regulate(h: &Tensor, durations: &[Vec<u32>]) -> Result<(Tensor, Vec<usize>)> {
    let squeeze = h.rank() == 2;
    let h3 = if squeeze { h.unsqueeze(2)? } else { h.clone() };
    let (b, p, _) = h3.dims3()?;
    if durations.len() != b {
        return Err(Error::Shape(format!("{} duration rows for batch of {b}", durations.len())));
    }
    let (a, frames, lens) = expansion(durations, p)?;
    let a = Tensor::from_vec(a, (b, frames, p), h.device())?.to_dtype(h.dtype())?;
    let out = a.matmul(&h3.contiguous()?)?;
    Ok((if squeeze { out.squeeze(2)? } else { out }, lens))
}

/// Inference durations from log-domain predictions: `max(1, round(exp(d) - 1))`,
/// the inverse of the `log(1 + frames)` training target.
pub fn durations_from_log(log_d: &[f32]) -> Vec<u32> {
    log_d.iter().map(|&d| ((d as f64).exp() - 1.0).round().max(1.0) as u32).collect()
}

/// Log-domain duration target `log(1 + frames)`.
pub fn log_duration_target(d: u32) -> f32 {
    (1.0 + d as f64).ln() as f32
}

/// Bucket index of `v` over `[lo, hi]` split into `bins` equal buckets.
pub fn quantize(v: f32, lo: f32, hi: f32, bins: usize) -> u32 {
    let x = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((x * bins as f32) as usize).min(bins - 1) as u32
}

/// Value range used to normalize a contour for its predictor and embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f32,
    pub hi: f32,
}

impl Range {
    pub fn normalize(&self, v: f32) -> f32 {
        (v - self.lo) / (self.hi - self.lo)
    }

    pub fn denormalize(&self, v: f32) -> f32 {
        self.lo + v * (self.hi - self.lo)
    }

    /// Covering range of the values, widened when degenerate.
    pub fn covering(values: impl IntoIterator<Item = f32>) -> Self {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-6 {
            hi = lo + 1.0;
        }
        Self { lo, hi }
    }
}

pub(crate) fn ids_tensor(rows: &[Vec<u32>], len: usize, device: &candle_core::Device) -> Result<Tensor> {
    let flat: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied().chain(std::iter::repeat(0)).take(len)).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), len), device)?)
}

pub(crate) fn padded_values(
    rows: &[Vec<f32>],
    len: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied().chain(std::iter::repeat(0.0)).take(len)).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), len), device)?.to_dtype(dtype)?)
}
