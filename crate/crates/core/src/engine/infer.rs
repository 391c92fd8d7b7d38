//! Ancestral few-step sampling and evaluation helpers.

use candle_core::{DType, Tensor};

use super::Model;
use crate::analysis::{classify_generated, style_accuracy, StyleAccuracyReport};
use crate::corpus::{MelSpectrogram, Utterance};
use crate::error::{Error, Result};
use crate::generator::{PhonemeSequence, VarianceValues};
use crate::nn::{to_vec_f32, Ctx};
use crate::rng::{randn, stream_rng, Stream};
use crate::schedule::{sample_posterior_batch, VarianceSchedule};
use crate::style::STYLE_DIM;

/// Where the style embedding comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum StyleSource {
    Prompt(String),
    Embedding(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub phonemes: PhonemeSequence,
    pub style: StyleSource,
    /// Ground-truth durations and contours; predicted ones are used when absent.
    pub targets: Option<VarianceValues>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    pub durations: Vec<u32>,
}

fn schedule_for(model: &Model, steps: Option<usize>) -> Result<VarianceSchedule> {
    match steps {
        None => Ok(model.schedule.clone()),
        Some(k) if k == model.schedule.steps() => Ok(model.schedule.clone()),
        Some(k) => model.schedule.respace(k),
    }
}

fn style_tensor(model: &Model, reqs: &[SynthesisRequest]) -> Result<Tensor> {
    let rows = reqs
        .iter()
        .map(|r| match &r.style {
            StyleSource::Prompt(p) => model.style_embeddings(&[p.as_str()]),
            StyleSource::Embedding(v) => {
                if v.len() != STYLE_DIM {
                    return Err(Error::Shape(format!("style embedding has {} values, need {STYLE_DIM}", v.len())));
                }
                Ok(Tensor::from_vec(v.clone(), (1, STYLE_DIM), model.device())?.to_dtype(model.dtype())?)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&rows, 0)?)
}

/// Runs `x_T ~ N(0, I)` through `steps` (default: the trained schedule)
/// ancestral denoising steps for every request. Noise comes from the
/// inference stream of `seed`.
pub fn synthesize_batch(
    model: &Model,
    reqs: &[SynthesisRequest],
    steps: Option<usize>,
    seed: u64,
) -> Result<Vec<Synthesis>> {
    if reqs.is_empty() {
        return Ok(Vec::new());
    }
    let sched = schedule_for(model, steps)?;
    let s = style_tensor(model, reqs)?;
    let ys: Vec<PhonemeSequence> = reqs.iter().map(|r| r.phonemes.clone()).collect();
    let targets: Option<Vec<VarianceValues>> = if reqs.iter().all(|r| r.targets.is_some()) {
        Some(reqs.iter().map(|r| r.targets.clone().unwrap()).collect())
    } else if reqs.iter().any(|r| r.targets.is_some()) {
        return Err(Error::Input("either every request or none may carry targets".into()));
    } else {
        None
    };
    let mut ctx = Ctx::eval();
    let cond = model.generator.condition(&ys, &s, targets.as_deref(), &mut ctx)?;
    let bins = model.cfg.generator.mel_bins;
    let frames = cond.context.dim(1)?;
    let dims = [reqs.len(), frames, bins];
    let mut rng = stream_rng(seed, Stream::Inference);
    let mut x = randn(&mut rng, &dims, model.dtype(), model.device())?.broadcast_mul(&cond.frame_mask)?;
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; reqs.len()];
        let model_ts = vec![sched.model_timestep(t); reqs.len()];
        let x0 = model.generator.denoise(&x, &cond, &s, &model_ts, &mut ctx)?;
        x = if t == 1 {
            x0
        } else {
            let noise = randn(&mut rng, &dims, model.dtype(), model.device())?;
            sample_posterior_batch(&x0, &x, &ts, &sched, &noise)?.broadcast_mul(&cond.frame_mask)?
        };
    }
    let x = x.to_dtype(DType::F32)?;
    (0..reqs.len())
        .map(|i| {
            let n = cond.frame_lengths[i];
            let data = to_vec_f32(&x.get(i)?.narrow(0, 0, n)?)?;
            Ok(Synthesis { mel: MelSpectrogram::new(n, bins, data)?, durations: cond.durations[i].clone() })
        })
        .collect()
}

/// Single-utterance synthesis.
pub fn synthesize(
    model: &Model,
    phonemes: &PhonemeSequence,
    style: StyleSource,
    steps: Option<usize>,
    seed: u64,
) -> Result<MelSpectrogram> {
    let req = SynthesisRequest { phonemes: phonemes.clone(), style, targets: None };
    Ok(synthesize_batch(model, &[req], steps, seed)?.remove(0).mel)
}

/// Mean absolute error between sampled and ground-truth mels, with
/// ground-truth durations and contours so frames align.
pub fn evaluate_mel_mae(
    model: &Model,
    utts: &[Utterance],
    steps: Option<usize>,
    seed: u64,
    batch: usize,
) -> Result<f64> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (k, chunk) in utts.chunks(batch.max(1)).enumerate() {
        let reqs: Vec<SynthesisRequest> = chunk
            .iter()
            .map(|u| SynthesisRequest {
                phonemes: u.phonemes.clone(),
                style: StyleSource::Prompt(u.prompt.text.clone()),
                targets: Some(u.variance()),
            })
            .collect();
        let out = synthesize_batch(model, &reqs, steps, seed.wrapping_add(k as u64))?;
        for (o, u) in out.iter().zip(chunk) {
            sum += o.mel.data.iter().zip(&u.mel.data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            count += u.mel.data.len();
        }
    }
    if count == 0 {
        return Err(Error::Input("no utterances to evaluate".into()));
    }
    Ok(sum / count as f64)
}

/// Synthesizes every prompt with predicted durations and scores the style
/// probes against the prompt labels.
pub fn evaluate_style(
    model: &Model,
    utts: &[Utterance],
    steps: Option<usize>,
    seed: u64,
    batch: usize,
) -> Result<(StyleAccuracyReport, Vec<Synthesis>)> {
    let factors = &model.cfg.style.factors;
    let mut preds = Vec::with_capacity(utts.len());
    let mut outputs = Vec::with_capacity(utts.len());
    for (k, chunk) in utts.chunks(batch.max(1)).enumerate() {
        let reqs: Vec<SynthesisRequest> = chunk
            .iter()
            .map(|u| SynthesisRequest {
                phonemes: u.phonemes.clone(),
                style: StyleSource::Prompt(u.prompt.text.clone()),
                targets: None,
            })
            .collect();
        for o in synthesize_batch(model, &reqs, steps, seed.wrapping_add(k as u64))? {
            preds.push(classify_generated(&o.mel, &o.durations, factors)?);
            outputs.push(o);
        }
    }
    let labels: Vec<_> = utts.iter().map(|u| u.prompt.labels.clone()).collect();
    Ok((style_accuracy(&preds, &labels)?, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{build_vocab, ModelConfig};

    fn model() -> Model {
        Model::new(&ModelConfig::micro(), build_vocab(&[]), 3, DType::F32).unwrap()
    }

    #[test]
    fn single_step_equals_one_generator_pass() {
        let mut cfg = ModelConfig::micro();
        cfg.schedule.steps = 1;
        cfg.schedule.beta_start = 0.3;
        cfg.schedule.beta_end = 0.3;
        let m = Model::new(&cfg, build_vocab(&[]), 3, DType::F32).unwrap();
        let y = PhonemeSequence::new(vec![1, 2, 3]);
        let prompt = "a loud girl with a bass";
        let out = synthesize(&m, &y, StyleSource::Prompt(prompt.into()), None, 11).unwrap();
        let s = m.style_embeddings(&[prompt]).unwrap();
        let cond = m.generator.condition(&[y], &s, None, &mut Ctx::eval()).unwrap();
        let dims = [1, cond.context.dim(1).unwrap(), cfg.generator.mel_bins];
        let x_t = randn(&mut stream_rng(11, Stream::Inference), &dims, DType::F32, m.device()).unwrap();
        let x0 = m.generator.denoise(&x_t, &cond, &s, &[1], &mut Ctx::eval()).unwrap();
        assert_eq!(out.data, to_vec_f32(&x0).unwrap());
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let m = model();
        let y = PhonemeSequence::new(vec![1, 2]);
        let a = synthesize(&m, &y, StyleSource::Prompt("a calm man".into()), None, 5).unwrap();
        let b = synthesize(&m, &y, StyleSource::Prompt("a calm man".into()), None, 5).unwrap();
        assert_eq!(a, b);
        for t in [1, 2, 4] {
            let o = synthesize(&m, &y, StyleSource::Prompt("a calm man".into()), Some(t), 5).unwrap();
            assert_eq!(o.bins, 4);
        }
        assert!(synthesize(&m, &y, StyleSource::Prompt("x".into()), Some(5), 5).is_err());
    }

    #[test]
    fn embedding_and_prompt_sources_agree() {
        let m = model();
        let y = PhonemeSequence::new(vec![2, 3]);
        let s = to_vec_f32(&m.style_embeddings(&["a sad lady"]).unwrap()).unwrap();
        let a = synthesize(&m, &y, StyleSource::Prompt("a sad lady".into()), None, 1).unwrap();
        let b = synthesize(&m, &y, StyleSource::Embedding(s), None, 1).unwrap();
        assert_eq!(a, b);
        assert!(synthesize(&m, &y, StyleSource::Embedding(vec![0.0; 3]), None, 1).is_err());
        assert!(synthesize(&m, &PhonemeSequence::new(vec![]), StyleSource::Prompt("a".into()), None, 1).is_err());
    }
}
