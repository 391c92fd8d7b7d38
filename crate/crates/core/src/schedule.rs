//! Discrete-time Gaussian diffusion: variance schedule, forward process,
//! closed-form marginal and the posterior `q(x_{t-1} | x_t, x_0)`.
//!
//! Timesteps are 1-based; `alpha_bar(0) == 1` so the posterior at `t == 1`
//! collapses onto the clean sample.

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::randn;

/// Schedule hyperparameters as they appear in the run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 4, beta_start: 0.1, beta_end: 0.7 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    /// Timestep index the generator sees at each step (identity unless respaced).
    model_timesteps: Vec<usize>,
}

impl VarianceSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let model_timesteps = (1..=betas.len()).collect();
        Ok(Self { betas, alphas, alpha_bars, model_timesteps })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t - 1]
    }

    /// Sub-schedule with `steps` steps visiting evenly spaced timesteps of
    /// this one and always ending at the last. Each new step jumps between
    /// the retained `alpha_bar` values, so marginals are unchanged.
    pub fn respace(&self, steps: usize) -> Result<Self> {
        let full = self.steps();
        if steps == 0 || steps > full {
            return Err(Error::Config(format!("cannot respace {full} steps into {steps}")));
        }
        let kept: Vec<usize> = (1..=steps).map(|i| (i * full + steps / 2) / steps).collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let mut out = Self::from_betas(betas)?;
        out.model_timesteps = kept.iter().map(|&t| self.model_timestep(t)).collect();
        Ok(out)
    }

    /// Posterior coefficients `(c_x0, c_xt, variance)` at `t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64, f64) {
        if t == 1 {
            // x_0 is known exactly; avoids 1 - (1 - beta) rounding in c_x0
            return (1.0, 0.0, 0.0);
        }
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
        (c0, ct, var)
    }
}

/// A noised sample together with its timestep.
#[derive(Debug, Clone)]
pub struct NoisySample {
    pub data: Tensor,
    pub t: usize,
}

/// Isotropic Gaussian `N(mean, variance * I)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub variance: f64,
}

impl GaussianPosterior {
    /// Reparameterized draw `mean + sqrt(variance) * noise`.
    pub fn sample_with(&self, noise: &Tensor) -> Result<Tensor> {
        same_shape(&self.mean, noise)?;
        if self.variance == 0.0 {
            return Ok(self.mean.clone());
        }
        Ok((&self.mean + (noise * self.variance.sqrt())?)?)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let noise = randn(rng, self.mean.dims(), self.mean.dtype(), self.mean.device())?;
        self.sample_with(&noise)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// One forward step: `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
pub fn q_sample_step(x_prev: &Tensor, t: usize, schedule: &VarianceSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(x_prev, noise)?;
    let beta = schedule.beta(t);
    Ok(((x_prev * (1.0 - beta).sqrt())? + (noise * beta.sqrt())?)?)
}

/// Closed-form marginal `sqrt(abar_t) x_0 + sqrt(1 - abar_t) noise`.
pub fn q_sample_closed(x0: &Tensor, t: usize, schedule: &VarianceSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    same_shape(x0, noise)?;
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

pub fn q_posterior(x0: &Tensor, xt: &Tensor, t: usize, schedule: &VarianceSchedule) -> Result<GaussianPosterior> {
    schedule.check_t(t)?;
    same_shape(x0, xt)?;
    let (c0, ct, variance) = schedule.posterior_coefficients(t);
    let mean = ((x0 * c0)? + (xt * ct)?)?;
    Ok(GaussianPosterior { mean, variance })
}

/// Draws `(x_{t-1}, x_t)` from the forward chain started at `x0`.
pub fn sample_training_pair(
    x0: &Tensor,
    t: usize,
    schedule: &VarianceSchedule,
    rng: &mut impl Rng,
) -> Result<(Tensor, NoisySample)> {
    schedule.check_t(t)?;
    let prev = if t == 1 {
        x0.clone()
    } else {
        let noise = randn(rng, x0.dims(), x0.dtype(), x0.device())?;
        q_sample_closed(x0, t - 1, schedule, &noise)?
    };
    let noise = randn(rng, x0.dims(), x0.dtype(), x0.device())?;
    let xt = q_sample_step(&prev, t, schedule, &noise)?;
    Ok((prev, NoisySample { data: xt, t }))
}

fn per_item(coefs: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut dims = vec![1usize; like.rank()];
    dims[0] = coefs.len();
    Ok(Tensor::from_vec(coefs.to_vec(), dims, &Device::Cpu)?.to_device(like.device())?.to_dtype(like.dtype())?)
}

/// Batched training pairs where item `i` uses timestep `ts[i]`. `noise_prev`
/// and `noise_step` are standard normal tensors shaped like `x0`.
pub fn sample_training_pair_batch(
    x0: &Tensor,
    ts: &[usize],
    schedule: &VarianceSchedule,
    noise_prev: &Tensor,
    noise_step: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if x0.dims()[0] != ts.len() {
        return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), x0.dims()[0])));
    }
    same_shape(x0, noise_prev)?;
    same_shape(x0, noise_step)?;
    for &t in ts {
        schedule.check_t(t)?;
    }
    let a: Vec<f64> = ts.iter().map(|&t| schedule.alpha_bar(t - 1).sqrt()).collect();
    let b: Vec<f64> = ts.iter().map(|&t| (1.0 - schedule.alpha_bar(t - 1)).sqrt()).collect();
    let prev = (x0.broadcast_mul(&per_item(&a, x0)?)? + noise_prev.broadcast_mul(&per_item(&b, x0)?)?)?;
    let c: Vec<f64> = ts.iter().map(|&t| (1.0 - schedule.beta(t)).sqrt()).collect();
    let d: Vec<f64> = ts.iter().map(|&t| schedule.beta(t).sqrt()).collect();
    let xt = (prev.broadcast_mul(&per_item(&c, x0)?)? + noise_step.broadcast_mul(&per_item(&d, x0)?)?)?;
    Ok((prev, xt))
}

/// Batched posterior draw with per-item timesteps; differentiable in `x0`.
pub fn sample_posterior_batch(
    x0: &Tensor,
    xt: &Tensor,
    ts: &[usize],
    schedule: &VarianceSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    same_shape(x0, xt)?;
    same_shape(x0, noise)?;
    let mut c0 = Vec::with_capacity(ts.len());
    let mut ct = Vec::with_capacity(ts.len());
    let mut sd = Vec::with_capacity(ts.len());
    for &t in ts {
        schedule.check_t(t)?;
        let (a, b, v) = schedule.posterior_coefficients(t);
        c0.push(a);
        ct.push(b);
        sd.push(v.sqrt());
    }
    let mean = (x0.broadcast_mul(&per_item(&c0, x0)?)? + xt.broadcast_mul(&per_item(&ct, x0)?)?)?;
    Ok((mean + noise.broadcast_mul(&per_item(&sd, x0)?)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use candle_core::DType;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn single_step_schedule() {
        let s = VarianceSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.3]);
        assert!((s.alpha_bars()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_step_alpha_bars() {
        let s = VarianceSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(VarianceSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(VarianceSchedule::linear(4, 0.0, 0.2).is_err());
        assert!(VarianceSchedule::linear(4, 0.1, 1.0).is_err());
        assert!(VarianceSchedule::linear(4, 0.5, 0.2).is_err());
        assert!(VarianceSchedule::from_betas(vec![0.1, 1.5]).is_err());
    }

    #[test]
    fn step_arithmetic() {
        let s = VarianceSchedule::from_betas(vec![0.19]).unwrap();
        let y = q_sample_step(&scalar(1.0), 1, &s, &scalar(1.0)).unwrap();
        assert!((val(&y) - (0.9 + 0.19f64.sqrt())).abs() < 1e-12);
        assert!((val(&y) - 1.33589).abs() < 1e-5);
        let shrink = q_sample_step(&scalar(2.5), 1, &s, &scalar(0.0)).unwrap();
        assert!((val(&shrink) - 2.5 * 0.9).abs() < 1e-12);
        let tiny = VarianceSchedule::from_betas(vec![f64::EPSILON]).unwrap();
        let same = q_sample_step(&scalar(0.7), 1, &tiny, &scalar(1.0)).unwrap();
        assert!((val(&same) - 0.7).abs() < 1e-7);
    }

    #[test]
    fn closed_form_arithmetic() {
        let s = VarianceSchedule::linear(2, 0.1, 0.2).unwrap();
        let y = q_sample_closed(&scalar(1.0), 2, &s, &scalar(1.0)).unwrap();
        assert!((val(&y) - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-12);
        assert!((val(&y) - 1.37768).abs() < 1e-5);
        let z = q_sample_closed(&scalar(0.0), 2, &s, &scalar(-1.5)).unwrap();
        assert!((val(&z) + 1.5 * 0.28f64.sqrt()).abs() < 1e-12);
        assert!(q_sample_closed(&scalar(0.0), 3, &s, &scalar(0.0)).is_err());
        assert!(q_sample_closed(&scalar(0.0), 1, &s, &Tensor::new(&[0.0, 1.0], &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn posterior_at_first_step_is_clean_sample() {
        let s = VarianceSchedule::linear(4, 0.1, 0.7).unwrap();
        let p = q_posterior(&scalar(0.37), &scalar(-2.0), 1, &s).unwrap();
        assert_eq!(p.variance, 0.0);
        assert!((val(&p.mean) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn posterior_no_noise_limit() {
        let s = VarianceSchedule::from_betas(vec![0.3, 1e-12]).unwrap();
        let p = q_posterior(&scalar(0.8), &scalar(0.8), 2, &s).unwrap();
        assert!((val(&p.mean) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn training_pair_contracts() {
        let s = VarianceSchedule::linear(4, 0.1, 0.7).unwrap();
        let x0 = Tensor::new(&[[0.5f64, -0.25], [1.0, 2.0]], &Device::Cpu).unwrap();
        let mut rng = stream_rng(1, Stream::Training);
        let (prev, xt) = sample_training_pair(&x0, 1, &s, &mut rng).unwrap();
        assert_eq!(prev.to_vec2::<f64>().unwrap(), x0.to_vec2::<f64>().unwrap());
        assert_eq!(xt.t, 1);
        assert_eq!(xt.data.dims(), x0.dims());
        let mut r1 = stream_rng(9, Stream::Training);
        let mut r2 = stream_rng(9, Stream::Training);
        let a = sample_training_pair(&x0, 3, &s, &mut r1).unwrap();
        let b = sample_training_pair(&x0, 3, &s, &mut r2).unwrap();
        assert_eq!(a.0.to_vec2::<f64>().unwrap(), b.0.to_vec2::<f64>().unwrap());
        assert_eq!(a.1.data.to_vec2::<f64>().unwrap(), b.1.data.to_vec2::<f64>().unwrap());
        assert!(sample_training_pair(&x0, 5, &s, &mut r1).is_err());
    }

    #[test]
    fn training_pair_marginal_matches_closed_form() {
        let s = VarianceSchedule::linear(4, 0.1, 0.7).unwrap();
        let n = 200_000;
        let x0 = Tensor::ones(n, DType::F64, &Device::Cpu).unwrap();
        let mut rng = stream_rng(21, Stream::Training);
        for t in 1..=4 {
            let (_, xt) = sample_training_pair(&x0, t, &s, &mut rng).unwrap();
            let v = xt.data.to_vec1::<f64>().unwrap();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let want_mean = s.alpha_bar(t).sqrt();
            let want_std = (1.0 - s.alpha_bar(t)).sqrt();
            assert!((mean - want_mean).abs() / want_mean < 0.01, "t={t} mean {mean}");
            assert!((std - want_std).abs() / want_std < 0.01, "t={t} std {std}");
        }
    }

    #[test]
    fn batched_pair_matches_scalar_formulas() {
        let s = VarianceSchedule::linear(4, 0.1, 0.7).unwrap();
        let x0 = Tensor::new(&[[1.0f64], [2.0], [-1.0]], &Device::Cpu).unwrap();
        let n1 = Tensor::new(&[[0.3f64], [-0.2], [1.0]], &Device::Cpu).unwrap();
        let n2 = Tensor::new(&[[0.5f64], [0.1], [-0.7]], &Device::Cpu).unwrap();
        let ts = [1, 2, 4];
        let (prev, xt) = sample_training_pair_batch(&x0, &ts, &s, &n1, &n2).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let x = x0.get(i).unwrap();
            let p = if t == 1 { x.clone() } else { q_sample_closed(&x, t - 1, &s, &n1.get(i).unwrap()).unwrap() };
            let q = q_sample_step(&p, t, &s, &n2.get(i).unwrap()).unwrap();
            assert!((val(&prev.get(i).unwrap()) - val(&p)).abs() < 1e-12);
            assert!((val(&xt.get(i).unwrap()) - val(&q)).abs() < 1e-12);
            let post = q_posterior(&x, &q, t, &s).unwrap().sample_with(&n2.get(i).unwrap()).unwrap();
            let batch = sample_posterior_batch(&x0, &xt, &ts, &s, &n2).unwrap();
            assert!((val(&batch.get(i).unwrap()) - val(&post)).abs() < 1e-12);
        }
    }

    #[test]
    fn respacing_preserves_marginals() {
        let s = VarianceSchedule::linear(4, 0.1, 0.7).unwrap();
        let same = s.respace(4).unwrap();
        for t in 1..=4 {
            assert!((same.alpha_bar(t) - s.alpha_bar(t)).abs() < 1e-12);
            assert_eq!(same.model_timestep(t), t);
        }
        let two = s.respace(2).unwrap();
        assert_eq!(two.model_timestep(1), 2);
        assert_eq!(two.model_timestep(2), 4);
        assert!((two.alpha_bar(2) - s.alpha_bar(4)).abs() < 1e-12);
        let one = s.respace(1).unwrap();
        assert_eq!(one.model_timestep(1), 4);
        assert!((one.alpha_bar(1) - s.alpha_bar(4)).abs() < 1e-12);
        assert!(s.respace(5).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decrease(steps in 1usize..12, a in 0.001f64..0.5, span in 0.0f64..0.49) {
            let s = VarianceSchedule::linear(steps, a, a + span).unwrap();
            prop_assert_eq!(s.betas().len(), steps);
            prop_assert_eq!(s.alphas().len(), steps);
            prop_assert_eq!(s.alpha_bars().len(), steps);
            for w in s.alpha_bars().windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            for (b, al) in s.betas().iter().zip(s.alphas()) {
                prop_assert_eq!(*al, 1.0 - *b);
            }
            prop_assert!(s.alpha_bar(steps) < 1.0);
        }

        #[test]
        fn posterior_variance_zero_only_at_first_step(steps in 1usize..8, a in 0.01f64..0.5) {
            let s = VarianceSchedule::linear(steps, a, (a + 0.3).min(0.95)).unwrap();
            for t in 1..=steps {
                let (_, _, v) = s.posterior_coefficients(t);
                prop_assert!(v >= 0.0);
                prop_assert_eq!(v == 0.0, t == 1);
            }
        }
    }
}
