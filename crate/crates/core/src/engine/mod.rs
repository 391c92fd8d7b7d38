//! Model assembly, adversarial training loop, ancestral sampling and checkpoints.

pub mod checkpoint;
pub mod infer;
pub mod optim;
pub mod train;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, Range};
use crate::nn::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::schedule::{ScheduleConfig, VarianceSchedule};
use crate::style::{StyleEncoder, StyleEncoderConfig, Vocab};

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint};
pub use infer::{
    evaluate_mel_mae, evaluate_style, synthesize, synthesize_batch, StyleSource, Synthesis, SynthesisRequest,
};
pub use optim::{Adam, AdamConfig};
pub use train::{
    checkpoint_dir, fit, pretrain_style, sample_timesteps, train_step, warm_start_style, Batch, FitOutcome, Phase,
    StepMetrics, StyleMode, TrainConfig, TrainState,
};

/// Architecture of every network plus the diffusion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub schedule: ScheduleConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub style: StyleEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            style: StyleEncoderConfig::default(),
        }
    }

    pub fn full() -> Self {
        Self { generator: GeneratorConfig::full(), discriminator: DiscriminatorConfig::full(), ..Self::desk() }
    }

    pub fn micro() -> Self {
        Self {
            generator: GeneratorConfig::micro(),
            discriminator: DiscriminatorConfig::micro(),
            style: StyleEncoderConfig { hidden: 8, heads: 2, layers: 1, ffn: 8, ..StyleEncoderConfig::default() },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.mel_bins != self.discriminator.mel_bins {
            return Err(Error::Config(format!(
                "generator has {} mel bins, discriminator {}",
                self.generator.mel_bins, self.discriminator.mel_bins
            )));
        }
        self.style.factors.validate()
    }

    /// Sets the pitch/energy ranges and phoneme table size from training data.
    pub fn calibrate(&mut self, data: &[Utterance]) {
        self.generator.pitch_range = Range::covering(data.iter().flat_map(|u| u.pitch.iter().copied()));
        self.generator.energy_range = Range::covering(data.iter().flat_map(|u| u.energy.iter().copied()));
        let max_id = data.iter().flat_map(|u| u.phonemes.ids.iter().copied()).max().unwrap_or(0) as usize;
        self.generator.phoneme_vocab = self.generator.phoneme_vocab.max(max_id + 1);
        let longest = data.iter().map(|u| u.phonemes.len()).max().unwrap_or(0);
        self.generator.max_phonemes = self.generator.max_phonemes.max(longest);
        let frames = data.iter().map(|u| u.frames()).max().unwrap_or(0);
        self.generator.max_frames = self.generator.max_frames.max(frames);
    }
}

/// Generator, discriminator and style encoder with their parameters.
///
/// Generator and style-encoder parameters share `gen_params`; the
/// discriminator's live in `disc_params` so the two optimizers never touch
/// each other's variables.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub style: StyleEncoder,
    pub schedule: VarianceSchedule,
}

impl Model {
    pub fn new(cfg: &ModelConfig, vocab: Vocab, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut gen_params = ParamStore::new(dtype, device.clone());
        let (generator, style) = {
            let mut b = gen_params.builder(&mut rng);
            let g = Generator::new(&mut b.pp("gen"), &cfg.generator)?;
            let s = StyleEncoder::new(&mut b.pp("style"), vocab, &cfg.style)?;
            (g, s)
        };
        let mut disc_params = ParamStore::new(dtype, device);
        let discriminator = Discriminator::new(&mut disc_params.builder(&mut rng).pp("disc"), &cfg.discriminator)?;
        Ok(Self {
            cfg: cfg.clone(),
            gen_params,
            disc_params,
            generator,
            discriminator,
            style,
            schedule: cfg.schedule.build()?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.gen_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.gen_params.device()
    }

    pub fn vocab(&self) -> &Vocab {
        self.style.vocab().expect("built-in style encoder")
    }

    /// Style embeddings `[batch, 128]` for prompt texts.
    pub fn style_embeddings(&self, prompts: &[&str]) -> Result<Tensor> {
        self.style.encode_prompts(prompts)
    }

    /// Variables updated by the generator optimizer.
    pub fn generator_vars(&self, include_style: bool) -> Vec<(String, Var)> {
        self.gen_params
            .iter()
            .filter(|(n, _)| include_style || !n.starts_with("style."))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn discriminator_vars(&self) -> Vec<(String, Var)> {
        self.disc_params.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
    }
}

/// Vocabulary covering the synthetic prompt grammar and every prompt in `data`.
pub fn build_vocab(data: &[Utterance]) -> Vocab {
    let words = crate::corpus::prompt_words().join(" ");
    Vocab::from_texts(std::iter::once(words.as_str()).chain(data.iter().map(|u| u.prompt.text.as_str())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CorpusSpec};
    use crate::norm::count_sites;

    #[test]
    fn presets_validate_and_stores_are_disjoint() {
        for cfg in [ModelConfig::desk(), ModelConfig::full(), ModelConfig::micro()] {
            cfg.validate().unwrap();
        }
        let m = Model::new(&ModelConfig::micro(), Vocab::from_texts(["a b c"]), 1, DType::F32).unwrap();
        assert!(m.gen_params.iter().all(|(n, _)| n.starts_with("gen.") || n.starts_with("style.")));
        assert!(m.disc_params.iter().all(|(n, _)| n.starts_with("disc.")));
        let g = &m.cfg.generator;
        assert_eq!(count_sites(&m.gen_params), 4 * g.n_fft_blocks + g.n_denoiser_blocks);
        assert!(m.generator_vars(false).len() < m.generator_vars(true).len());
    }

    #[test]
    fn calibration_covers_data() {
        let data = generate_synthetic_corpus(&CorpusSpec { n_utterances: 20, ..Default::default() }).unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.calibrate(&data);
        let r = cfg.generator.energy_range;
        assert!(data.iter().flat_map(|u| &u.energy).all(|&e| e >= r.lo && e <= r.hi));
        assert_eq!(cfg.generator.pitch_range, Range { lo: 10.0, hi: 50.0 });
        let vocab = build_vocab(&data);
        for u in &data {
            let toks = crate::style::tokenize_prompt(&u.prompt.text, &vocab).unwrap();
            assert!(!toks.contains(&crate::style::UNK_ID));
        }
    }
}
