//! Synthetic style-factored corpus and the on-disk dataset format.
//!
//! Synthetic mels are built analytically on 80 bins so that every style
//! factor can be read back from the spectrogram:
//!
//! ```text
//! M[f, b] = A * e(f) * (bump(b; c) + 0.5 * bump(b; c + 20 + g) + T_e(b))
//! ```
//!
//! with pitch center `c` in {10, 30, 50}, volume `A` in {0.3, 0.6, 1.0},
//! gender offset `g` in {-5, +5}, an emotion texture `T_e` (a raised cosine
//! of a per-emotion frequency and phase), and a per-phoneme envelope `e`
//! that averages to exactly 1 over each phoneme. Speed sets the base frames
//! per phoneme (8, 5, 3); neighbouring phonemes trade one frame in a way
//! that keeps the total at `base * phonemes`.
//!
//! Dataset directory layout: `manifest.json` plus, per utterance,
//! `{id}.mel`, `{id}.f0` and `{id}.energy`. Each tensor file is two
//! little-endian `u32` (rows, cols) followed by `rows * cols` little-endian
//! `f32` values in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::generator::{PhonemeSequence, VarianceValues};
use crate::rng::{normal_vec, stream_rng, Stream};
use crate::style::{StyleFactorConfig, StylePrompt};

pub const PITCH_CENTERS: [usize; 3] = [10, 30, 50];
pub const SPEED_FRAMES: [u32; 3] = [8, 5, 3];
pub const VOLUME_LEVELS: [f32; 3] = [0.3, 0.6, 1.0];
pub const GENDER_OFFSETS: [i32; 2] = [-5, 5];
pub const EMOTION_FREQS: [f32; 5] = [3.0, 5.0, 7.0, 9.0, 11.0];
pub const EMOTION_PHASES: [f32; 5] = [0.0, 1.3, 2.6, 3.9, 5.2];
pub const SECONDARY_OFFSET: usize = 20;
pub const SECONDARY_GAIN: f32 = 0.5;
pub const TEXTURE_GAIN: f32 = 0.1;
pub const SYNTHETIC_BINS: usize = 80;

/// Factors understood by the synthetic construction and their maximum class counts.
pub const KNOWN_FACTORS: [(&str, usize); 5] =
    [("gender", 2), ("pitch", 3), ("speed", 3), ("volume", 3), ("emotion", 5)];

/// Class used for a factor that is absent from the factor config.
fn default_class(name: &str) -> usize {
    match name {
        "pitch" | "speed" | "volume" => 1,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub mel_bins: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 22050, n_fft: 1024, hop: 256, mel_bins: 80 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.n_fft == 0 || self.hop == 0 || self.mel_bins == 0 {
            return Err(Error::Config("mel config values must be positive".into()));
        }
        if self.hop >= self.n_fft {
            return Err(Error::Config(format!("hop {} must be smaller than n_fft {}", self.hop, self.n_fft)));
        }
        Ok(())
    }
}

/// Row-major `frames x bins` magnitude matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::Shape(format!("{} values for a {frames}x{bins} mel", data.len())));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self { frames, bins, data: vec![0.0; frames * bins] }
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        &self.data[f * self.bins..(f + 1) * self.bins]
    }

    pub fn get(&self, f: usize, b: usize) -> f32 {
        self.data[f * self.bins + b]
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0 || self.bins == 0
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self { data: self.data.iter().map(|v| v * c).collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub mel: MelSpectrogram,
    pub durations: Vec<u32>,
    pub pitch: Vec<f32>,
    pub energy: Vec<f32>,
    pub prompt: StylePrompt,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        let ctx = |e: Error| Error::Corrupt { item: self.id.clone(), reason: e.to_string() };
        if self.phonemes.is_empty() {
            return Err(ctx(Error::Input("no phonemes".into())));
        }
        self.variance().validate(self.phonemes.len()).map_err(ctx)?;
        if self.mel.frames != self.pitch.len() {
            return Err(ctx(Error::Shape(format!(
                "mel has {} frames but durations sum to {}",
                self.mel.frames,
                self.pitch.len()
            ))));
        }
        Ok(())
    }

    pub fn variance(&self) -> VarianceValues {
        VarianceValues { durations: self.durations.clone(), pitch: self.pitch.clone(), energy: self.energy.clone() }
    }

    pub fn frames(&self) -> usize {
        self.mel.frames
    }
}

/// Full class assignment used by the construction (absent factors take
/// their default class).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StyleClasses {
    pub gender: usize,
    pub pitch: usize,
    pub speed: usize,
    pub volume: usize,
    pub emotion: usize,
}

impl StyleClasses {
    pub fn from_labels(labels: &BTreeMap<String, usize>) -> Self {
        let get = |n: &str| labels.get(n).copied().unwrap_or_else(|| default_class(n));
        Self {
            gender: get("gender"),
            pitch: get("pitch"),
            speed: get("speed"),
            volume: get("volume"),
            emotion: get("emotion"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_utterances: usize,
    pub phoneme_vocab_size: usize,
    pub factors: StyleFactorConfig,
    pub seed: u64,
    pub noise_std: f64,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 512,
            phoneme_vocab_size: 40,
            factors: StyleFactorConfig::default(),
            seed: 0,
            noise_std: 0.01,
            min_phonemes: 4,
            max_phonemes: 12,
        }
    }
}

/// Checks that every factor is one the construction can render.
pub fn validate_factors(factors: &StyleFactorConfig) -> Result<()> {
    factors.validate()?;
    for f in &factors.factors {
        let max = KNOWN_FACTORS
            .iter()
            .find(|(n, _)| *n == f.name)
            .map(|(_, k)| *k)
            .ok_or_else(|| Error::Config(format!("synthetic corpus has no factor `{}`", f.name)))?;
        if f.num_classes > max {
            return Err(Error::Config(format!("factor `{}` supports at most {max} classes", f.name)));
        }
    }
    Ok(())
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 {
            return Err(Error::Config("corpus needs at least one utterance".into()));
        }
        if self.phoneme_vocab_size < 2 {
            return Err(Error::Config("phoneme vocabulary needs at least two ids (0 is padding)".into()));
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(Error::Config("need 1 <= min_phonemes <= max_phonemes".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        validate_factors(&self.factors)
    }
}

fn bump(b: f32, center: f32) -> f32 {
    (-0.5 * (b - center).powi(2)).exp()
}

/// Emotion texture value at bin `b`.
pub fn texture(emotion: usize, b: usize) -> f32 {
    let x = 2.0 * std::f32::consts::PI * EMOTION_FREQS[emotion] * b as f32 / SYNTHETIC_BINS as f32
        + EMOTION_PHASES[emotion];
    TEXTURE_GAIN * 0.5 * (1.0 + x.cos())
}

/// Secondary band center for a pitch and gender class.
pub fn secondary_center(pitch: usize, gender: usize) -> usize {
    (PITCH_CENTERS[pitch] as i32 + SECONDARY_OFFSET as i32 + GENDER_OFFSETS[gender]) as usize
}

/// Spectral shape shared by every frame of an utterance (before envelope and volume).
pub fn spectral_shape(c: &StyleClasses, bins: usize) -> Vec<f32> {
    let p = PITCH_CENTERS[c.pitch] as f32;
    let sec = secondary_center(c.pitch, c.gender) as f32;
    (0..bins).map(|b| bump(b as f32, p) + SECONDARY_GAIN * bump(b as f32, sec) + texture(c.emotion, b)).collect()
}

/// Durations for a phoneme sequence at a speed class; neighbouring pairs
/// trade a frame depending on their ids, keeping the total fixed.
pub fn synthetic_durations(ids: &[u32], speed: usize) -> Vec<u32> {
    let base = SPEED_FRAMES[speed];
    let mut d = vec![base; ids.len()];
    for pair in (0..ids.len() / 2).map(|i| 2 * i) {
        let j = ((ids[pair] + ids[pair + 1]) % 3) as i64 - 1;
        d[pair] = (base as i64 + j) as u32;
        d[pair + 1] = (base as i64 - j) as u32;
    }
    d
}

/// Phoneme envelope over `d` frames; averages to exactly 1.
fn envelope(id: u32, d: u32) -> Vec<f32> {
    let a = 0.1 + 0.2 * ((id * 37) % 7) as f32 / 6.0;
    (0..d).map(|k| 1.0 + a * (2.0 * std::f32::consts::PI * (k as f32 + 0.5) / d as f32).sin()).collect()
}

/// Clean synthetic mel for a phoneme sequence, durations and style classes.
pub fn render_mel(ids: &[u32], durations: &[u32], classes: &StyleClasses) -> MelSpectrogram {
    let bins = SYNTHETIC_BINS;
    let shape = spectral_shape(classes, bins);
    let amp = VOLUME_LEVELS[classes.volume];
    let mut data = Vec::new();
    for (&id, &d) in ids.iter().zip(durations) {
        for e in envelope(id, d) {
            data.extend(shape.iter().map(|s| amp * e * s));
        }
    }
    let frames = data.len() / bins;
    MelSpectrogram { frames, bins, data }
}

const GENDER_WORDS: [&[&str]; 2] = [&["man", "male", "gentleman", "boy"], &["woman", "female", "lady", "girl"]];
const PITCH_WORDS: [&[&str]; 3] =
    [&["low", "deep", "bass"], &["medium", "middle", "neutral"], &["high", "shrill", "sharp"]];
const SPEED_WORDS: [&[&str]; 3] =
    [&["slowly", "leisurely", "sluggishly"], &["steadily", "evenly", "naturally"], &["quickly", "rapidly", "hastily"]];
const VOLUME_WORDS: [&[&str]; 3] =
    [&["quiet", "soft", "faint"], &["moderate", "regular", "normal"], &["loud", "strong", "booming"]];
const EMOTION_WORDS: [&[&str]; 5] = [
    &["calm", "peaceful", "relaxed"],
    &["happy", "cheerful", "joyful"],
    &["sad", "gloomy", "sorrowful"],
    &["angry", "furious", "annoyed"],
    &["surprised", "amazed", "astonished"],
];
const TEMPLATES: [&str; 4] = [
    "a {g} speaks {sp} with {p} pitch and {v} volume in a {e} tone",
    "please say it {sp} as a {e} {g} with {v} volume and {p} pitch",
    "{v} and {e} voice of a {g} talking {sp} with {p} pitch",
    "a {e} {g} with a {p} {v} voice speaking {sp}",
];

/// Renders a prompt for the classes with random synonyms and template.
pub fn render_prompt(c: &StyleClasses, rng: &mut impl Rng) -> String {
    let pick = |words: &[&str], rng: &mut dyn rand::RngCore| -> String {
        let i = rng.random_range(0..words.len());
        words[i].to_string()
    };
    let template = *TEMPLATES.choose(rng).expect("templates");
    let g = pick(GENDER_WORDS[c.gender], rng);
    let p = pick(PITCH_WORDS[c.pitch], rng);
    let sp = pick(SPEED_WORDS[c.speed], rng);
    let v = pick(VOLUME_WORDS[c.volume], rng);
    let e = pick(EMOTION_WORDS[c.emotion], rng);
    template.replace("{g}", &g).replace("{p}", &p).replace("{sp}", &sp).replace("{v}", &v).replace("{e}", &e)
}

/// Every word the prompt templates can produce.
pub fn prompt_words() -> Vec<&'static str> {
    let mut words: Vec<&str> = TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| !w.starts_with('{'))
        .chain(GENDER_WORDS.iter().flat_map(|w| w.iter().copied()))
        .chain(PITCH_WORDS.iter().flat_map(|w| w.iter().copied()))
        .chain(SPEED_WORDS.iter().flat_map(|w| w.iter().copied()))
        .chain(VOLUME_WORDS.iter().flat_map(|w| w.iter().copied()))
        .chain(EMOTION_WORDS.iter().flat_map(|w| w.iter().copied()))
        .collect();
    words.sort_unstable();
    words.dedup();
    words
}

/// Frame RMS over bins.
pub fn frame_rms(frame: &[f32]) -> f32 {
    if frame.is_empty() {
        return 0.0;
    }
    (frame.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / frame.len() as f64).sqrt() as f32
}

/// Deterministic synthetic corpus.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Corpus);
    let mut out = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let n = rng.random_range(spec.min_phonemes..=spec.max_phonemes);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(1..spec.phoneme_vocab_size as u32)).collect();
        let mut labels = BTreeMap::new();
        for f in &spec.factors.factors {
            labels.insert(f.name.clone(), rng.random_range(0..f.num_classes));
        }
        let classes = StyleClasses::from_labels(&labels);
        let text = render_prompt(&classes, &mut rng);
        let durations = synthetic_durations(&ids, classes.speed);
        let mut mel = render_mel(&ids, &durations, &classes);
        if spec.noise_std > 0.0 {
            let noise = normal_vec(&mut rng, mel.data.len());
            for (v, z) in mel.data.iter_mut().zip(noise) {
                *v += (z * spec.noise_std) as f32;
            }
        }
        let pitch = vec![PITCH_CENTERS[classes.pitch] as f32; mel.frames];
        let energy = (0..mel.frames).map(|f| frame_rms(mel.frame(f))).collect();
        out.push(Utterance {
            id: format!("utt{i:05}"),
            phonemes: PhonemeSequence::new(ids),
            mel,
            durations,
            pitch,
            energy,
            prompt: StylePrompt { text, labels },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    phonemes: Vec<u32>,
    durations: Vec<u32>,
    prompt: StylePrompt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    mel_config: MelConfig,
    utterances: Vec<ManifestEntry>,
}

const FORMAT: &str = "diffgan-tts-dataset/1";

/// Writes a `rows x cols` f32 matrix with its shape header.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for {rows}x{cols}", data.len())));
    }
    let mut bytes = Vec::with_capacity(8 + 4 * data.len());
    bytes.extend((rows as u32).to_le_bytes());
    bytes.extend((cols as u32).to_le_bytes());
    for v in data {
        bytes.extend(v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads a matrix written by [`write_matrix`]; `item` names the owner in errors.
pub fn read_matrix(path: &Path, item: &str) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: String| Error::Corrupt { item: item.to_string(), reason };
    if bytes.len() < 8 {
        return Err(corrupt(format!("{} is missing its shape header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt(format!("{} has an absurd shape {rows}x{cols}", path.display())))?;
    if bytes.len() - 8 != expect {
        return Err(corrupt(format!(
            "{} holds {} bytes of data, shape {rows}x{cols} needs {expect}",
            path.display(),
            bytes.len() - 8
        )));
    }
    let data = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((rows, cols, data))
}

/// A loaded dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mel_config: MelConfig,
    pub utterances: Vec<Utterance>,
}

pub fn save_dataset(utterances: &[Utterance], mel_config: &MelConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(utterances.len());
    for u in utterances {
        u.validate()?;
        if u.id.is_empty() || u.id.contains(['/', '\\']) || u.id.starts_with('.') {
            return Err(Error::Input(format!("utterance id `{}` is not a valid file stem", u.id)));
        }
        write_matrix(&dir.join(format!("{}.mel", u.id)), u.mel.frames, u.mel.bins, &u.mel.data)?;
        write_matrix(&dir.join(format!("{}.f0", u.id)), u.pitch.len(), 1, &u.pitch)?;
        write_matrix(&dir.join(format!("{}.energy", u.id)), u.energy.len(), 1, &u.energy)?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            phonemes: u.phonemes.ids.clone(),
            durations: u.durations.clone(),
            prompt: u.prompt.clone(),
        });
    }
    let manifest = Manifest { format: FORMAT.into(), mel_config: *mel_config, utterances: entries };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Corrupt {
            item: path.display().to_string(),
            reason: format!("unknown format `{}`", manifest.format),
        });
    }
    manifest.mel_config.validate()?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for e in manifest.utterances {
        let (frames, bins, data) = read_matrix(&dir.join(format!("{}.mel", e.id)), &e.id)?;
        let (pr, pc, pitch) = read_matrix(&dir.join(format!("{}.f0", e.id)), &e.id)?;
        let (er, ec, energy) = read_matrix(&dir.join(format!("{}.energy", e.id)), &e.id)?;
        if pc != 1 || ec != 1 || pr != frames || er != frames {
            return Err(Error::Corrupt {
                item: e.id.clone(),
                reason: format!("contours {pr}x{pc} and {er}x{ec} do not match {frames} mel frames"),
            });
        }
        if bins != manifest.mel_config.mel_bins {
            return Err(Error::Corrupt {
                item: e.id.clone(),
                reason: format!("mel has {bins} bins, manifest says {}", manifest.mel_config.mel_bins),
            });
        }
        let u = Utterance {
            id: e.id,
            phonemes: PhonemeSequence::new(e.phonemes),
            mel: MelSpectrogram { frames, bins, data },
            durations: e.durations,
            pitch,
            energy,
            prompt: e.prompt,
        };
        u.validate()?;
        utterances.push(u);
    }
    Ok(Dataset { mel_config: manifest.mel_config, utterances })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, noise: f64) -> CorpusSpec {
        CorpusSpec { n_utterances: n, noise_std: noise, seed: 7, ..CorpusSpec::default() }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(&spec(20, 0.01)).unwrap();
        let b = generate_synthetic_corpus(&spec(20, 0.01)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&CorpusSpec { seed: 8, ..spec(20, 0.01) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn alignment_invariant_holds() {
        for u in generate_synthetic_corpus(&spec(200, 0.01)).unwrap() {
            u.validate().unwrap();
            let total: u32 = u.durations.iter().sum();
            let base = SPEED_FRAMES[u.prompt.labels["speed"]];
            assert_eq!(total, base * u.phonemes.len() as u32);
            assert!(u.durations.iter().all(|&d| d >= 2));
            assert!((4..=12).contains(&u.phonemes.len()));
        }
    }

    #[test]
    fn fast_four_phonemes_is_twelve_frames() {
        let classes = StyleClasses { gender: 0, pitch: 1, speed: 2, volume: 1, emotion: 0 };
        let ids = [3, 9, 4, 1];
        let d = synthetic_durations(&ids, classes.speed);
        assert_eq!(d.iter().sum::<u32>(), 12);
        assert_eq!(render_mel(&ids, &d, &classes).frames, 12);
    }

    #[test]
    fn envelope_averages_to_one() {
        for id in 0..10 {
            for d in 1..10 {
                let e = envelope(id, d);
                let mean = e.iter().sum::<f32>() / d as f32;
                assert!((mean - 1.0).abs() < 1e-5, "id {id} d {d}: {mean}");
            }
        }
    }

    #[test]
    fn factor_marginals_are_near_uniform() {
        let corpus = generate_synthetic_corpus(&CorpusSpec { n_utterances: 3000, ..spec(1, 0.0) }).unwrap();
        for f in &StyleFactorConfig::default().factors {
            let mut counts = vec![0usize; f.num_classes];
            for u in &corpus {
                counts[u.prompt.labels[&f.name]] += 1;
            }
            for c in counts {
                let frac = c as f64 / corpus.len() as f64;
                assert!((frac - 1.0 / f.num_classes as f64).abs() < 0.05, "{}: {frac}", f.name);
            }
        }
    }

    #[test]
    fn prompts_use_known_words() {
        let words = prompt_words();
        for u in generate_synthetic_corpus(&spec(50, 0.0)).unwrap() {
            for w in crate::style::split_words(&u.prompt.text) {
                assert!(words.contains(&w.as_str()), "{w}");
            }
        }
    }

    #[test]
    fn rejects_unknown_factors_and_bad_specs() {
        let f = StyleFactorConfig::new(&[("accent", 2)]).unwrap();
        assert!(generate_synthetic_corpus(&CorpusSpec { factors: f, ..spec(2, 0.0) }).is_err());
        let f = StyleFactorConfig::new(&[("emotion", 6)]).unwrap();
        assert!(generate_synthetic_corpus(&CorpusSpec { factors: f, ..spec(2, 0.0) }).is_err());
        assert!(generate_synthetic_corpus(&spec(0, 0.0)).is_err());
        let partial = StyleFactorConfig::new(&[("volume", 3), ("speed", 2)]).unwrap();
        let c = generate_synthetic_corpus(&CorpusSpec { factors: partial, ..spec(10, 0.0) }).unwrap();
        assert!(c.iter().all(|u| u.prompt.labels.len() == 2 && u.prompt.labels["speed"] < 2));
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&spec(6, 0.01)).unwrap();
        save_dataset(&corpus, &MelConfig::default(), dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.utterances, corpus);
        assert_eq!(loaded.mel_config, MelConfig::default());

        let victim = dir.path().join(format!("{}.mel", corpus[3].id));
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 7]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Corrupt { item, .. }) => assert_eq!(item, corpus[3].id),
            other => panic!("expected corruption error, got {other:?}"),
        }
        fs::write(&victim, &bytes[..5]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn manifest_tensor_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&spec(2, 0.0)).unwrap();
        save_dataset(&corpus, &MelConfig::default(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(format!("{}.energy", corpus[1].id))).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn mel_config_defaults() {
        let m = MelConfig::default();
        assert_eq!((m.sample_rate, m.n_fft, m.hop, m.mel_bins), (22050, 1024, 256, 80));
        assert!(MelConfig { hop: 2048, ..m }.validate().is_err());
    }
}
