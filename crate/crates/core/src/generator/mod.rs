//! The generator `G(x_t, y, s, t)`: a style-conditioned phoneme encoder,
//! variance adaptor, frame-level decoder producing a conditioning context, and
//! a residual denoiser that predicts the clean mel.

pub mod denoiser;
pub mod fft;
pub mod variance;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention_bias, position_encoding, sequence_mask, Builder, Ctx, Embedding};

pub use denoiser::Denoiser;
pub use fft::{FftBlock, FftStack};
pub use variance::{
    durations_from_log, length_regulate, log_duration_target, quantize, PredictedVariances, Range, VariancePredictor,
    VarianceValues,
};

/// Integer phoneme ids for one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<u32>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Input("empty phoneme sequence".into()));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Input(format!("phoneme id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub phoneme_vocab: usize,
    pub max_phonemes: usize,
    pub n_fft_blocks: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    pub ffn_filter: usize,
    pub variance_filter: usize,
    pub variance_kernel: usize,
    pub variance_dropout: f64,
    pub variance_bins: usize,
    pub n_denoiser_blocks: usize,
    pub denoiser_hidden: usize,
    pub denoiser_dropout: f64,
    pub mel_bins: usize,
    pub max_frames: usize,
    pub pitch_range: Range,
    pub energy_range: Range,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// Laptop-sized model.
    pub fn desk() -> Self {
        Self {
            phoneme_vocab: 64,
            max_phonemes: 64,
            n_fft_blocks: 2,
            hidden: 64,
            n_heads: 2,
            conv_kernel: 9,
            ffn_filter: 256,
            variance_filter: 64,
            variance_kernel: 3,
            variance_dropout: 0.5,
            variance_bins: 256,
            n_denoiser_blocks: 4,
            denoiser_hidden: 64,
            denoiser_dropout: 0.2,
            mel_bins: 80,
            max_frames: 1000,
            pitch_range: Range { lo: 0.0, hi: 80.0 },
            energy_range: Range { lo: 0.0, hi: 1.0 },
        }
    }

    /// Full-size settings: four FFT blocks of width 256 with 2 heads, kernel 9
    /// and filter 1024; 256-wide variance predictors; 20 denoiser blocks of 512.
    pub fn full() -> Self {
        Self {
            phoneme_vocab: 128,
            max_phonemes: 256,
            n_fft_blocks: 4,
            hidden: 256,
            n_heads: 2,
            conv_kernel: 9,
            ffn_filter: 1024,
            variance_filter: 256,
            n_denoiser_blocks: 20,
            denoiser_hidden: 512,
            max_frames: 2000,
            ..Self::desk()
        }
    }

    /// Tiny model for gradient checks.
    pub fn micro() -> Self {
        Self {
            phoneme_vocab: 8,
            max_phonemes: 16,
            n_fft_blocks: 1,
            hidden: 8,
            n_heads: 2,
            conv_kernel: 3,
            ffn_filter: 8,
            variance_filter: 8,
            variance_bins: 16,
            n_denoiser_blocks: 1,
            denoiser_hidden: 8,
            mel_bins: 4,
            max_frames: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("phoneme_vocab", self.phoneme_vocab),
            ("max_phonemes", self.max_phonemes),
            ("n_fft_blocks", self.n_fft_blocks),
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("conv_kernel", self.conv_kernel),
            ("ffn_filter", self.ffn_filter),
            ("variance_filter", self.variance_filter),
            ("variance_kernel", self.variance_kernel),
            ("variance_bins", self.variance_bins),
            ("n_denoiser_blocks", self.n_denoiser_blocks),
            ("denoiser_hidden", self.denoiser_hidden),
            ("mel_bins", self.mel_bins),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("generator `{name}` must be positive")));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.n_heads)));
        }
        for (name, p) in [("variance_dropout", self.variance_dropout), ("denoiser_dropout", self.denoiser_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        for (name, r) in [("pitch_range", self.pitch_range), ("energy_range", self.energy_range)] {
            if r.hi.partial_cmp(&r.lo) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Config(format!("{name} must have hi > lo")));
            }
        }
        Ok(())
    }
}

/// Encoder output for a padded batch.
#[derive(Debug, Clone)]
pub struct EncodedPhonemes {
    /// `[batch, phonemes, hidden]`.
    pub hidden: Tensor,
    /// `[batch, phonemes, 1]`.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

/// Everything the denoiser needs besides `x_t` and `t`, plus the adaptor's
/// predictions for the variance losses.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `[batch, frames, hidden]`.
    pub context: Tensor,
    /// `[batch, frames, 1]`.
    pub frame_mask: Tensor,
    pub frame_lengths: Vec<usize>,
    /// `[batch, phonemes, 1]`.
    pub phoneme_mask: Tensor,
    /// Durations used for length regulation.
    pub durations: Vec<Vec<u32>>,
    pub predicted: PredictedVariances,
    /// Per-phoneme pitch/energy predictions expanded to frames, `[batch, frames]`.
    pub frame_pitch: Tensor,
    pub frame_energy: Tensor,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    embed: Embedding,
    encoder: FftStack,
    duration: VariancePredictor,
    pitch: VariancePredictor,
    energy: VariancePredictor,
    pitch_embed: Embedding,
    energy_embed: Embedding,
    decoder: FftStack,
    denoiser: Denoiser,
}

impl Generator {
    pub fn new(b: &mut Builder, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let vp = |b: &mut Builder, name: &str| {
            VariancePredictor::new(
                &mut b.pp(name),
                cfg.hidden,
                cfg.variance_filter,
                cfg.variance_kernel,
                cfg.variance_dropout,
            )
        };
        Ok(Self {
            embed: Embedding::new(&mut b.pp("embed"), cfg.phoneme_vocab, cfg.hidden)?,
            encoder: FftStack::new(
                &mut b.pp("encoder"),
                cfg.n_fft_blocks,
                cfg.hidden,
                cfg.n_heads,
                cfg.conv_kernel,
                cfg.ffn_filter,
            )?,
            duration: vp(b, "duration")?,
            pitch: vp(b, "pitch")?,
            energy: vp(b, "energy")?,
            pitch_embed: Embedding::new(&mut b.pp("pitch_embed"), cfg.variance_bins, cfg.hidden)?,
            energy_embed: Embedding::new(&mut b.pp("energy_embed"), cfg.variance_bins, cfg.hidden)?,
            decoder: FftStack::new(
                &mut b.pp("decoder"),
                cfg.n_fft_blocks,
                cfg.hidden,
                cfg.n_heads,
                cfg.conv_kernel,
                cfg.ffn_filter,
            )?,
            denoiser: Denoiser::new(
                &mut b.pp("denoiser"),
                cfg.mel_bins,
                cfg.hidden,
                cfg.denoiser_hidden,
                cfg.n_denoiser_blocks,
                cfg.denoiser_dropout,
            )?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Phoneme embedding plus sinusoidal positions through the encoder stack.
    pub fn encode_phonemes(&self, ys: &[PhonemeSequence], s: &Tensor) -> Result<EncodedPhonemes> {
        let dtype = s.dtype();
        let device = s.device();
        if ys.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for y in ys {
            y.validate(self.cfg.phoneme_vocab)?;
        }
        let lengths: Vec<usize> = ys.iter().map(|y| y.len()).collect();
        let len = *lengths.iter().max().unwrap();
        if len > self.cfg.max_phonemes {
            return Err(Error::Input(format!(
                "{len} phonemes exceed the positional table of {}",
                self.cfg.max_phonemes
            )));
        }
        let rows: Vec<Vec<u32>> = ys.iter().map(|y| y.ids.clone()).collect();
        let ids = variance::ids_tensor(&rows, len, device)?;
        let mask2 = sequence_mask(&lengths, len, dtype, device)?;
        let mask = mask2.unsqueeze(2)?;
        let x = self
            .embed
            .forward(&ids)?
            .broadcast_add(&position_encoding(len, self.cfg.hidden, dtype, device)?)?
            .broadcast_mul(&mask)?;
        let hidden = self.encoder.forward(&x, &mask, &attention_bias(&mask2)?, s)?;
        Ok(EncodedPhonemes { hidden, mask, lengths })
    }

    pub fn predict_variances(&self, enc: &EncodedPhonemes, ctx: &mut Ctx) -> Result<PredictedVariances> {
        Ok(PredictedVariances {
            log_duration: self.duration.forward(&enc.hidden, &enc.mask, ctx)?,
            pitch: self.pitch.forward(&enc.hidden, &enc.mask, ctx)?,
            energy: self.energy.forward(&enc.hidden, &enc.mask, ctx)?,
        })
    }

    fn bins(&self, values: &[f32], range: Range) -> Vec<u32> {
        values.iter().map(|&v| quantize(range.normalize(v), 0.0, 1.0, self.cfg.variance_bins)).collect()
    }

    /// Frame hiddens plus pitch/energy embeddings through the decoder stack.
    pub fn decode_context(&self, frame_h: &Tensor, frame_lengths: &[usize], s: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, frames, _) = frame_h.dims3()?;
        if frames == 0 || frame_lengths.contains(&0) {
            return Err(Error::Input("zero-frame utterance".into()));
        }
        if frames > self.cfg.max_frames {
            return Err(Error::Input(format!("{frames} frames exceed max_frames {}", self.cfg.max_frames)));
        }
        let mask2 = sequence_mask(frame_lengths, frames, frame_h.dtype(), frame_h.device())?;
        let mask = mask2.unsqueeze(2)?;
        let x = frame_h
            .broadcast_add(&position_encoding(frames, self.cfg.hidden, frame_h.dtype(), frame_h.device())?)?
            .broadcast_mul(&mask)?;
        let out = self.decoder.forward(&x, &mask, &attention_bias(&mask2)?, s)?;
        Ok((out, mask))
    }

    /// Encoder, variance adaptor and decoder. With `targets`, durations and
    /// pitch/energy embeddings come from the ground truth (teacher forcing);
    /// otherwise from the predictors.
    pub fn condition(
        &self,
        ys: &[PhonemeSequence],
        s: &Tensor,
        targets: Option<&[VarianceValues]>,
        ctx: &mut Ctx,
    ) -> Result<Conditioning> {
        let enc = self.encode_phonemes(ys, s)?;
        let predicted = self.predict_variances(&enc, ctx)?;
        let durations: Vec<Vec<u32>> = match targets {
            Some(t) => {
                if t.len() != ys.len() {
                    return Err(Error::Shape(format!("{} targets for batch of {}", t.len(), ys.len())));
                }
                for (v, y) in t.iter().zip(ys) {
                    v.validate(y.len())?;
                }
                t.iter().map(|v| v.durations.clone()).collect()
            }
            None => {
                let log_d = predicted.log_duration.to_dtype(DType::F32)?.to_vec2::<f32>()?;
                log_d.iter().zip(&enc.lengths).map(|(row, &n)| durations_from_log(&row[..n])).collect()
            }
        };
        let (frame_h, frame_lengths) = length_regulate(&enc.hidden, &durations)?;
        let frames = frame_h.dim(1)?;
        let (frame_pitch, _) = length_regulate(&predicted.pitch, &durations)?;
        let (frame_energy, _) = length_regulate(&predicted.energy, &durations)?;
        let (pitch_bins, energy_bins): (Vec<Vec<u32>>, Vec<Vec<u32>>) = match targets {
            Some(t) => t
                .iter()
                .map(|v| (self.bins(&v.pitch, self.cfg.pitch_range), self.bins(&v.energy, self.cfg.energy_range)))
                .unzip(),
            None => {
                let p = frame_pitch.to_dtype(DType::F32)?.to_vec2::<f32>()?;
                let e = frame_energy.to_dtype(DType::F32)?.to_vec2::<f32>()?;
                let q = |row: &[f32], n: usize| -> Vec<u32> {
                    row[..n].iter().map(|&v| quantize(v, 0.0, 1.0, self.cfg.variance_bins)).collect()
                };
                p.iter().zip(&e).zip(&frame_lengths).map(|((pr, er), &n)| (q(pr, n), q(er, n))).unzip()
            }
        };
        let device = s.device();
        let var_h = (self.pitch_embed.forward(&variance::ids_tensor(&pitch_bins, frames, device)?)?
            + self.energy_embed.forward(&variance::ids_tensor(&energy_bins, frames, device)?)?)?;
        let (context, frame_mask) = self.decode_context(&(frame_h + var_h)?, &frame_lengths, s)?;
        Ok(Conditioning {
            context,
            frame_mask,
            frame_lengths,
            phoneme_mask: enc.mask,
            durations,
            predicted,
            frame_pitch,
            frame_energy,
        })
    }

    /// Clean-mel estimate `x'_0` for model timesteps `ts` (one per item).
    pub fn denoise(
        &self,
        x_t: &Tensor,
        cond: &Conditioning,
        s: &Tensor,
        ts: &[usize],
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        self.denoiser.forward(x_t, &cond.context, &cond.frame_mask, s, ts, ctx)
    }

    /// Full forward pass: conditioning followed by one denoising call.
    pub fn forward(
        &self,
        x_t: &Tensor,
        ys: &[PhonemeSequence],
        s: &Tensor,
        ts: &[usize],
        targets: Option<&[VarianceValues]>,
        ctx: &mut Ctx,
    ) -> Result<(Tensor, Conditioning)> {
        let cond = self.condition(ys, s, targets, ctx)?;
        let x0 = self.denoise(x_t, &cond, s, ts, ctx)?;
        Ok((x0, cond))
    }
}

/// Pads per-utterance `[frames, bins]` row-major mels into `[batch, max_frames, bins]`.
pub fn pad_mels(mels: &[(&[f32], usize)], bins: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let frames = mels.iter().map(|(_, f)| *f).max().unwrap_or(0);
    let mut data = vec![0f32; mels.len() * frames * bins];
    for (i, (m, f)) in mels.iter().enumerate() {
        if m.len() != f * bins {
            return Err(Error::Shape(format!("mel {i} has {} values for {f}x{bins}", m.len())));
        }
        data[i * frames * bins..i * frames * bins + m.len()].copy_from_slice(m);
    }
    Ok(Tensor::from_vec(data, (mels.len(), frames, bins), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::norm::count_sites;
    use crate::rng::{randn, stream_rng, Stream};
    use crate::style::STYLE_DIM;

    fn build(cfg: &GeneratorConfig, dtype: DType) -> (ParamStore, Generator) {
        let mut rng = stream_rng(5, Stream::Init);
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let g = Generator::new(&mut store.builder(&mut rng).pp("gen"), cfg).unwrap();
        (store, g)
    }

    fn style(n: usize, seed: u64) -> Tensor {
        randn(&mut stream_rng(seed, Stream::Training), &[n, STYLE_DIM], DType::F64, &Device::Cpu).unwrap()
    }

    fn targets(durs: &[u32]) -> VarianceValues {
        let f: u32 = durs.iter().sum();
        VarianceValues {
            durations: durs.to_vec(),
            pitch: (0..f).map(|i| 10.0 + i as f32).collect(),
            energy: vec![0.5; f as usize],
        }
    }

    #[test]
    fn presets_validate() {
        for c in [GeneratorConfig::desk(), GeneratorConfig::full(), GeneratorConfig::micro()] {
            c.validate().unwrap();
        }
        let p = GeneratorConfig::full();
        assert_eq!((p.n_fft_blocks, p.hidden, p.n_heads, p.conv_kernel, p.ffn_filter), (4, 256, 2, 9, 1024));
        assert_eq!((p.n_denoiser_blocks, p.denoiser_hidden, p.denoiser_dropout), (20, 512, 0.2));
        assert_eq!((p.variance_kernel, p.variance_filter, p.variance_dropout), (3, 256, 0.5));
        let bad = GeneratorConfig { n_heads: 3, ..GeneratorConfig::desk() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn every_norm_site_is_cpln() {
        let cfg = GeneratorConfig::micro();
        let (store, _) = build(&cfg, DType::F64);
        assert_eq!(count_sites(&store), 2 * cfg.n_fft_blocks * 2 + cfg.n_denoiser_blocks);
    }

    #[test]
    fn encoder_shape_and_position_dependence() {
        let cfg = GeneratorConfig { hidden: 16, ..GeneratorConfig::micro() };
        let (_, g) = build(&cfg, DType::F64);
        let s = style(1, 1);
        let a = g.encode_phonemes(&[PhonemeSequence::new(vec![1, 2, 3])], &s).unwrap().hidden;
        assert_eq!(a.dims(), &[1, 3, 16]);
        let b = g.encode_phonemes(&[PhonemeSequence::new(vec![3, 2, 1])], &s).unwrap().hidden;
        let a0 = a.get(0).unwrap().get(0).unwrap().to_vec1::<f64>().unwrap();
        let b2 = b.get(0).unwrap().get(2).unwrap().to_vec1::<f64>().unwrap();
        let diff: f64 = a0.iter().zip(&b2).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "permuting inputs only permuted outputs");
        let long = PhonemeSequence::new(vec![1; cfg.max_phonemes + 1]);
        assert!(g.encode_phonemes(&[long], &s).is_err());
    }

    #[test]
    fn neutralized_encoder_reduces_to_normalized_embedding() {
        let cfg = GeneratorConfig { hidden: 8, ..GeneratorConfig::micro() };
        let (store, g) = build(&cfg, DType::F64);
        for (name, var) in store.iter() {
            let zero = name.contains(".attn.out.") || name.contains(".conv1.") || name.contains(".conv2.");
            if name.starts_with("gen.encoder") && zero {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
            if name.starts_with("gen.encoder") && name.ends_with(".rho") {
                var.set(&var.ones_like().unwrap()).unwrap();
            }
        }
        let s = style(1, 2);
        let ids = vec![1u32, 4, 2];
        let out = g.encode_phonemes(&[PhonemeSequence::new(ids.clone())], &s).unwrap().hidden;
        let table = store.get("gen.embed.table").unwrap().as_tensor().to_vec2::<f64>().unwrap();
        for (p, &id) in ids.iter().enumerate() {
            let pe = crate::nn::sinusoid(p as f64, 8);
            let e: Vec<f64> = table[id as usize].iter().zip(&pe).map(|(a, b)| a + b).collect();
            // two stacked normalizations of the embedded input
            let mut x = e;
            for _ in 0..2 {
                let mu = x.iter().sum::<f64>() / 8.0;
                let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
                x = x.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect();
            }
            let got = out.get(0).unwrap().get(p).unwrap().to_vec1::<f64>().unwrap();
            for (a, b) in got.iter().zip(&x) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn decoder_depends_on_style_and_rejects_empty() {
        let cfg = GeneratorConfig::micro();
        let (_, g) = build(&cfg, DType::F64);
        let h = randn(&mut stream_rng(3, Stream::Training), &[1, 5, cfg.hidden], DType::F64, &Device::Cpu).unwrap();
        let (a, _) = g.decode_context(&h, &[5], &style(1, 1)).unwrap();
        let (b, _) = g.decode_context(&h, &[5], &style(1, 2)).unwrap();
        assert_eq!(a.dims(), &[1, 5, cfg.hidden]);
        let d = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d > 1e-6);
        let empty = Tensor::zeros((1, 0, cfg.hidden), DType::F64, &Device::Cpu).unwrap();
        assert!(g.decode_context(&empty, &[0], &style(1, 1)).is_err());
    }

    #[test]
    fn teacher_forced_forward_matches_target_frames_and_is_deterministic() {
        let cfg = GeneratorConfig::micro();
        let (_, g) = build(&cfg, DType::F64);
        let ys = [PhonemeSequence::new(vec![1, 2, 3]), PhonemeSequence::new(vec![4, 5])];
        let t = [targets(&[2, 1, 3]), targets(&[1, 2])];
        let s = style(2, 4);
        let x_t = randn(&mut stream_rng(1, Stream::Training), &[2, 6, cfg.mel_bins], DType::F64, &Device::Cpu).unwrap();
        let (x0, cond) = g.forward(&x_t, &ys, &s, &[1, 2], Some(&t), &mut Ctx::eval()).unwrap();
        assert_eq!(x0.dims(), x_t.dims());
        assert_eq!(cond.frame_lengths, vec![6, 3]);
        assert_eq!(cond.predicted.log_duration.dims(), &[2, 3]);
        let (again, _) = g.forward(&x_t, &ys, &s, &[1, 2], Some(&t), &mut Ctx::eval()).unwrap();
        assert_eq!(x0.to_vec3::<f64>().unwrap(), again.to_vec3::<f64>().unwrap());
        // padded frames of the shorter item stay zero
        let row = x0.get(1).unwrap().get(4).unwrap().to_vec1::<f64>().unwrap();
        assert!(row.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn timestep_changes_output() {
        let cfg = GeneratorConfig::micro();
        let (_, g) = build(&cfg, DType::F64);
        let ys = [PhonemeSequence::new(vec![1, 2])];
        let t = [targets(&[2, 2])];
        let s = style(1, 4);
        let x_t = randn(&mut stream_rng(1, Stream::Training), &[1, 4, cfg.mel_bins], DType::F64, &Device::Cpu).unwrap();
        let (a, _) = g.forward(&x_t, &ys, &s, &[1], Some(&t), &mut Ctx::eval()).unwrap();
        let (b, _) = g.forward(&x_t, &ys, &s, &[2], Some(&t), &mut Ctx::eval()).unwrap();
        let d = (a - b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d > 1e-8);
        let wrong =
            randn(&mut stream_rng(1, Stream::Training), &[1, 5, cfg.mel_bins], DType::F64, &Device::Cpu).unwrap();
        assert!(g.forward(&wrong, &ys, &s, &[1], Some(&t), &mut Ctx::eval()).is_err());
    }

    #[test]
    fn inference_uses_predicted_rounded_durations() {
        let cfg = GeneratorConfig::micro();
        let (_, g) = build(&cfg, DType::F64);
        let ys = [PhonemeSequence::new(vec![1, 2, 3])];
        let cond = g.condition(&ys, &style(1, 6), None, &mut Ctx::eval()).unwrap();
        let log_d = cond.predicted.log_duration.to_dtype(DType::F32).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(cond.durations[0], durations_from_log(&log_d[0]));
        assert!(cond.durations[0].iter().all(|&d| d >= 1));
        assert_eq!(cond.frame_lengths[0] as u32, cond.durations[0].iter().sum::<u32>());
    }

    #[test]
    fn dropout_only_in_training() {
        let cfg = GeneratorConfig::micro();
        let (_, g) = build(&cfg, DType::F64);
        let ys = [PhonemeSequence::new(vec![1, 2, 3])];
        let s = style(1, 6);
        let enc = g.encode_phonemes(&ys, &s).unwrap();
        let a = g.predict_variances(&enc, &mut Ctx::eval()).unwrap().log_duration.to_vec2::<f64>().unwrap();
        let b = g.predict_variances(&enc, &mut Ctx::eval()).unwrap().log_duration.to_vec2::<f64>().unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 3);
        let mut rng = stream_rng(9, Stream::Training);
        let c = g.predict_variances(&enc, &mut Ctx::train(&mut rng)).unwrap().log_duration.to_vec2::<f64>().unwrap();
        assert_ne!(a, c);
    }
}
