//! Training losses: least-squares GAN terms, feature matching, variance MSEs
//! and mel reconstruction, plus the weighted generator total.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_duration: f64,
    pub lambda_energy: f64,
    pub lambda_pitch: f64,
    pub lambda_fm: f64,
    pub lambda_mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_duration: 0.1, lambda_energy: 0.1, lambda_pitch: 0.1, lambda_fm: 2.0, lambda_mel: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lambda_duration: 0.0, lambda_energy: 0.0, lambda_pitch: 0.0, lambda_fm: 0.0, lambda_mel: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_duration, self.lambda_energy, self.lambda_pitch, self.lambda_fm, self.lambda_mel];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_duration: self.lambda_duration * k,
            lambda_energy: self.lambda_energy * k,
            lambda_pitch: self.lambda_pitch * k,
            lambda_fm: self.lambda_fm * k,
            lambda_mel: self.lambda_mel * k,
        }
    }
}

/// Unweighted generator loss terms.
#[derive(Debug, Clone)]
pub struct GeneratorLossParts {
    pub adv: Tensor,
    pub duration: Tensor,
    pub pitch: Tensor,
    pub energy: Tensor,
    pub fm: Tensor,
    pub mel: Tensor,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `(D_real - 1)^2 + D_fake^2`, averaged over the batch for vector inputs.
pub fn discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    same_shape(d_real, d_fake, "discriminator scores")?;
    let real = (d_real - 1.0)?.sqr()?.mean_all()?;
    let fake = d_fake.sqr()?.mean_all()?;
    Ok((real + fake)?)
}

/// `(D_fake - 1)^2`, averaged over the batch.
pub fn adversarial_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok((d_fake - 1.0)?.sqr()?.mean_all()?)
}

/// Sum over layers of the element-count-normalized l1 distance.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real vs {} fake feature maps", real.len(), fake.len())));
    }
    let mut total: Option<Tensor> = None;
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        same_shape(r, f, &format!("feature map {i}"))?;
        let term = (r - f)?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Mean of `(pred - target)^2` over positions where `mask` is 1.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "mse operands")?;
    same_shape(pred, mask, "mse mask")?;
    let n = mask.sum_all()?;
    Ok((pred - target)?.sqr()?.mul(mask)?.sum_all()?.div(&n)?)
}

/// Duration, pitch and energy MSEs. Durations compare log-domain predictions
/// with `log(1 + d)` targets per phoneme; pitch and energy compare frame
/// contours. Masks select valid phonemes and frames.
#[allow(clippy::too_many_arguments)]
pub fn variance_loss(
    pred_log_duration: &Tensor,
    target_log_duration: &Tensor,
    phoneme_mask: &Tensor,
    pred_pitch: &Tensor,
    target_pitch: &Tensor,
    pred_energy: &Tensor,
    target_energy: &Tensor,
    frame_mask: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    Ok((
        masked_mse(pred_log_duration, target_log_duration, phoneme_mask)?,
        masked_mse(pred_pitch, target_pitch, frame_mask)?,
        masked_mse(pred_energy, target_energy, frame_mask)?,
    ))
}

/// Mean absolute error over all elements.
pub fn mel_reconstruction_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "mel")?;
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Mean absolute error over valid frames only; `mask` is `[batch, frames, 1]`.
pub fn masked_mel_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "mel")?;
    let bins = pred.dim(2)? as f64;
    let n = (mask.sum_all()? * bins)?;
    Ok((pred - target)?.abs()?.broadcast_mul(mask)?.sum_all()?.div(&n)?)
}

/// `L_adv + λ_dur L_dur + λ_energy L_energy + λ_pitch L_pitch + λ_fm L_fm + λ_mel L_mel`.
pub fn generator_total_loss(parts: &GeneratorLossParts, w: &LossWeights) -> Result<Tensor> {
    let mut total = parts.adv.clone();
    for (term, weight) in [
        (&parts.duration, w.lambda_duration),
        (&parts.energy, w.lambda_energy),
        (&parts.pitch, w.lambda_pitch),
        (&parts.fm, w.lambda_fm),
        (&parts.mel, w.lambda_mel),
    ] {
        if weight != 0.0 {
            total = (total + (term * weight)?)?;
        }
    }
    Ok(total)
}
