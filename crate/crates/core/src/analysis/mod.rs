//! Style-factor probes for generated mels, comparison exports, the
//! timestep ablation and a Griffin-Lim waveform fallback.
//!
//! The probes invert the synthetic construction in [`crate::corpus`]:
//!
//! | factor  | probe                                                                 |
//! |---------|-----------------------------------------------------------------------|
//! | pitch   | median per-frame band centroid, nearest of 10/30/50                    |
//! | gender  | time-averaged energy near `c + 15` versus `c + 25`                    |
//! | emotion | Pearson correlation with each texture on bins away from both bands     |
//! | speed   | frames per phoneme, nearest of 8/5/3 (thresholds at the midpoints)    |
//! | volume  | mean frame RMS over the RMS of the detected shape, nearest level in log |
//!
//! Every nearest-class search breaks ties towards the lower class index.

pub mod ablation;
pub mod griffin_lim;
pub mod plots;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    frame_rms, secondary_center, spectral_shape, texture, MelSpectrogram, StyleClasses, KNOWN_FACTORS, PITCH_CENTERS,
    SPEED_FRAMES, SYNTHETIC_BINS, VOLUME_LEVELS,
};
use crate::error::{Error, Result};
use crate::style::StyleFactorConfig;

pub use ablation::{ablate_timesteps, format_ablation_table, AblationRow};
pub use griffin_lim::{griffin_lim, griffin_lim_magnitude, mel_filterbank, mel_from_waveform, stft_magnitude};
pub use plots::{export_plot_data, PlotPair};

/// Contour value for frames below the RMS floor.
pub const UNVOICED: f32 = -1.0;
pub const RMS_FLOOR: f32 = 1e-4;
/// Half-width of the centroid window around the strongest bin.
const CENTROID_HALF_WIDTH: usize = 3;
/// Bins closer than this to a band center are ignored by the emotion probe.
const BAND_GUARD: usize = 4;
const GENDER_HALF_WIDTH: usize = 1;

fn non_empty(mel: &MelSpectrogram) -> Result<()> {
    if mel.is_empty() || mel.bins == 0 {
        return Err(Error::Input("empty mel-spectrogram".into()));
    }
    Ok(())
}

/// Per-frame RMS over bins.
pub fn extract_energy(mel: &MelSpectrogram) -> Result<Vec<f32>> {
    non_empty(mel)?;
    Ok((0..mel.frames).map(|f| frame_rms(mel.frame(f))).collect())
}

/// Per-frame magnitude-weighted centroid of the strongest band, in bins.
/// Frames under [`RMS_FLOOR`] get [`UNVOICED`].
pub fn extract_pitch_contour(mel: &MelSpectrogram) -> Result<Vec<f32>> {
    non_empty(mel)?;
    Ok((0..mel.frames)
        .map(|f| {
            let frame = mel.frame(f);
            if frame_rms(frame) < RMS_FLOOR {
                return UNVOICED;
            }
            let peak = argmax(frame);
            let lo = peak.saturating_sub(CENTROID_HALF_WIDTH);
            let hi = (peak + CENTROID_HALF_WIDTH + 1).min(frame.len());
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for (b, v) in frame.iter().enumerate().take(hi).skip(lo) {
                let w = v.max(0.0) as f64;
                num += w * b as f64;
                den += w;
            }
            if den > 0.0 {
                (num / den) as f32
            } else {
                peak as f32
            }
        })
        .collect())
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the candidate closest to `x`; ties go to the lower index.
fn nearest(x: f64, candidates: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.into_iter().enumerate() {
        let d = (x - c).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn median(mut v: Vec<f32>) -> Option<f32> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f32::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn mean_spectrum(mel: &MelSpectrogram) -> Vec<f64> {
    let mut acc = vec![0.0f64; mel.bins];
    for f in 0..mel.frames {
        for (a, v) in acc.iter_mut().zip(mel.frame(f)) {
            *a += *v as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= mel.frames as f64);
    acc
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn window_mean(spec: &[f64], center: usize, half: usize) -> f64 {
    let lo = center.saturating_sub(half);
    let hi = (center + half + 1).min(spec.len());
    if lo >= hi {
        return 0.0;
    }
    spec[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
}

fn class_limit(factors: &StyleFactorConfig, name: &str) -> usize {
    let known = KNOWN_FACTORS.iter().find(|(n, _)| *n == name).map(|(_, k)| *k).unwrap_or(1);
    factors.get(name).map(|f| f.num_classes.min(known)).unwrap_or(known)
}

/// Predicted class for every configured factor of a generated mel.
///
/// `durations` gives the frames of each phoneme; it is required when speed
/// is configured. Factors the synthetic construction does not know are
/// rejected.
pub fn classify_generated(
    mel: &MelSpectrogram,
    durations: &[u32],
    factors: &StyleFactorConfig,
) -> Result<BTreeMap<String, usize>> {
    non_empty(mel)?;
    if mel.bins != SYNTHETIC_BINS {
        return Err(Error::Shape(format!("probes expect {SYNTHETIC_BINS} bins, got {}", mel.bins)));
    }
    for f in &factors.factors {
        if !KNOWN_FACTORS.iter().any(|(n, _)| *n == f.name) {
            return Err(Error::Config(format!("no probe for factor `{}`", f.name)));
        }
    }
    let spec = mean_spectrum(mel);

    let voiced: Vec<f32> = extract_pitch_contour(mel)?.into_iter().filter(|&p| p != UNVOICED).collect();
    let n_pitch = class_limit(factors, "pitch");
    let pitch =
        median(voiced).map(|m| nearest(m as f64, PITCH_CENTERS[..n_pitch].iter().map(|&c| c as f64))).unwrap_or(0);

    let n_gender = class_limit(factors, "gender");
    let gender = if n_gender < 2 {
        0
    } else {
        let low = window_mean(&spec, secondary_center(pitch, 0), GENDER_HALF_WIDTH);
        let high = window_mean(&spec, secondary_center(pitch, 1), GENDER_HALF_WIDTH);
        usize::from(high > low)
    };

    let bands = [PITCH_CENTERS[pitch], secondary_center(pitch, 0), secondary_center(pitch, 1)];
    let keep: Vec<usize> = (0..mel.bins).filter(|b| bands.iter().all(|c| b.abs_diff(*c) > BAND_GUARD)).collect();
    let observed: Vec<f64> = keep.iter().map(|&b| spec[b]).collect();
    let mut emotion = (0, f64::NEG_INFINITY);
    for e in 0..class_limit(factors, "emotion") {
        let template: Vec<f64> = keep.iter().map(|&b| texture(e, b) as f64).collect();
        let r = pearson(&observed, &template);
        if r > emotion.1 {
            emotion = (e, r);
        }
    }
    let emotion = emotion.0;

    let speed = if factors.get("speed").is_some() {
        if durations.is_empty() {
            return Err(Error::Input("speed probe needs phoneme durations".into()));
        }
        let total: u64 = durations.iter().map(|&d| d as u64).sum();
        if total != mel.frames as u64 {
            return Err(Error::Shape(format!("durations sum to {total}, mel has {} frames", mel.frames)));
        }
        let per = total as f64 / durations.len() as f64;
        nearest(per, SPEED_FRAMES[..class_limit(factors, "speed")].iter().map(|&s| s as f64))
    } else {
        1
    };

    let shape = spectral_shape(&StyleClasses { gender, pitch, speed, volume: 0, emotion }, mel.bins);
    let reference = frame_rms(&shape) as f64;
    let energy = extract_energy(mel)?;
    let mean_rms = energy.iter().map(|&e| e as f64).sum::<f64>() / energy.len() as f64;
    let ratio = (mean_rms / reference).max(f64::MIN_POSITIVE);
    let volume = nearest(ratio.ln(), VOLUME_LEVELS[..class_limit(factors, "volume")].iter().map(|&v| (v as f64).ln()));

    let found = [("gender", gender), ("pitch", pitch), ("speed", speed), ("volume", volume), ("emotion", emotion)];
    Ok(factors
        .names()
        .map(|n| {
            let class = found.iter().find(|(f, _)| *f == n).map(|(_, c)| *c).expect("known factor");
            (n.to_string(), class)
        })
        .collect())
}

/// Per-factor accuracy of predicted classes against labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleAccuracyReport {
    pub per_factor: BTreeMap<String, f64>,
    pub mean: f64,
    pub n: usize,
}

impl StyleAccuracyReport {
    pub fn accuracy(&self, factor: &str) -> Option<f64> {
        self.per_factor.get(factor).copied()
    }
}

/// Fraction correct per factor, over the items that carry a label for it;
/// `mean` averages the factors present in the labels.
pub fn style_accuracy(
    predictions: &[BTreeMap<String, usize>],
    labels: &[BTreeMap<String, usize>],
) -> Result<StyleAccuracyReport> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Input("no items to score".into()));
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, l) in predictions.iter().zip(labels) {
        for (factor, class) in l {
            let e = tally.entry(factor.clone()).or_default();
            e.1 += 1;
            if p.get(factor) == Some(class) {
                e.0 += 1;
            }
        }
    }
    let per_factor: BTreeMap<String, f64> = tally.into_iter().map(|(f, (hit, n))| (f, hit as f64 / n as f64)).collect();
    let mean = if per_factor.is_empty() { 0.0 } else { per_factor.values().sum::<f64>() / per_factor.len() as f64 };
    Ok(StyleAccuracyReport { per_factor, mean, n: labels.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, render_mel, synthetic_durations, CorpusSpec};
    use proptest::prelude::*;

    fn labels(g: usize, p: usize, s: usize, v: usize, e: usize) -> BTreeMap<String, usize> {
        [("gender", g), ("pitch", p), ("speed", s), ("volume", v), ("emotion", e)]
            .into_iter()
            .map(|(n, c)| (n.to_string(), c))
            .collect()
    }

    #[test]
    fn every_class_combination_is_recovered_from_clean_mels() {
        let ids = [3, 7, 1, 12, 5];
        let factors = StyleFactorConfig::default();
        for g in 0..2 {
            for p in 0..3 {
                for s in 0..3 {
                    for v in 0..3 {
                        for e in 0..5 {
                            let l = labels(g, p, s, v, e);
                            let c = StyleClasses::from_labels(&l);
                            let d = synthetic_durations(&ids, s);
                            let mel = render_mel(&ids, &d, &c);
                            assert_eq!(classify_generated(&mel, &d, &factors).unwrap(), l);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noisy_corpus_is_classified_exactly() {
        let data = generate_synthetic_corpus(&CorpusSpec { n_utterances: 200, seed: 4, ..Default::default() }).unwrap();
        let factors = StyleFactorConfig::default();
        let preds: Vec<_> = data.iter().map(|u| classify_generated(&u.mel, &u.durations, &factors).unwrap()).collect();
        let truth: Vec<_> = data.iter().map(|u| u.prompt.labels.clone()).collect();
        let report = style_accuracy(&preds, &truth).unwrap();
        assert_eq!(report.mean, 1.0, "{report:?}");
    }

    #[test]
    fn pitch_contour_of_high_class_sits_on_band() {
        let ids = [1, 2, 3, 4];
        let c = StyleClasses::from_labels(&labels(1, 2, 1, 2, 3));
        let mel = render_mel(&ids, &synthetic_durations(&ids, 1), &c);
        let contour = extract_pitch_contour(&mel).unwrap();
        assert_eq!(contour.len(), mel.frames);
        assert!((median(contour).unwrap() - 50.0).abs() <= 2.0);
    }

    #[test]
    fn silent_and_constant_mels() {
        let zero = MelSpectrogram::zeros(6, 80);
        assert!(extract_pitch_contour(&zero).unwrap().iter().all(|&p| p == UNVOICED));
        assert!(extract_energy(&zero).unwrap().iter().all(|&e| e == 0.0));
        let c = MelSpectrogram::new(3, 5, vec![-0.7; 15]).unwrap();
        assert!(extract_energy(&c).unwrap().iter().all(|&e| (e - 0.7).abs() < 1e-6));
        assert!(extract_energy(&MelSpectrogram::zeros(0, 80)).is_err());
        let p = classify_generated(&zero, &[3, 3], &StyleFactorConfig::default()).unwrap();
        assert_eq!(p, labels(0, 0, 2, 0, 0));
    }

    #[test]
    fn volume_pair_ratio() {
        let ids = [2, 9, 4, 4, 6];
        let d = synthetic_durations(&ids, 0);
        let loud = render_mel(&ids, &d, &StyleClasses::from_labels(&labels(0, 1, 0, 2, 1)));
        let quiet = render_mel(&ids, &d, &StyleClasses::from_labels(&labels(0, 1, 0, 0, 1)));
        let mean = |m: &MelSpectrogram| extract_energy(m).unwrap().iter().sum::<f32>() / m.frames as f32;
        let ratio = mean(&loud) / mean(&quiet);
        assert!((ratio / (10.0 / 3.0) - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn speed_midpoint_ties_to_lower_index() {
        let factors = StyleFactorConfig::new(&[("speed", 3)]).unwrap();
        let mel = MelSpectrogram::new(13, 80, vec![0.5; 13 * 80]).unwrap();
        assert_eq!(classify_generated(&mel, &[6, 7], &factors).unwrap()["speed"], 0);
        let mel = MelSpectrogram::new(8, 80, vec![0.5; 8 * 80]).unwrap();
        assert_eq!(classify_generated(&mel, &[4, 4], &factors).unwrap()["speed"], 1);
        assert!(classify_generated(&mel, &[], &factors).is_err());
        assert!(classify_generated(&mel, &[4, 5], &factors).is_err());
        assert!(classify_generated(&mel, &[], &StyleFactorConfig::new(&[("pitch", 3)]).unwrap()).is_ok());
    }

    #[test]
    fn accuracy_counts() {
        let truth: Vec<_> = (0..10).map(|i| labels(i % 2, 0, 0, 0, 0)).collect();
        let mut preds = truth.clone();
        assert!(style_accuracy(&preds, &truth).unwrap().per_factor.values().all(|&a| a == 1.0));
        for p in preds.iter_mut().take(5) {
            let g = p["gender"];
            p.insert("gender".into(), 1 - g);
        }
        let r = style_accuracy(&preds, &truth).unwrap();
        assert_eq!(r.accuracy("gender"), Some(0.5));
        assert!((r.mean - 0.9).abs() < 1e-12);
        let flipped: Vec<_> = truth.iter().map(|l| labels(1 - l["gender"], 0, 0, 0, 0)).collect();
        assert_eq!(style_accuracy(&flipped, &truth).unwrap().accuracy("gender"), Some(0.0));
        assert!(style_accuracy(&preds[..3], &truth).is_err());
    }

    proptest! {
        #[test]
        fn energy_scales_with_mel(c in 0.0f32..5.0, seed in 0u64..50) {
            let data = generate_synthetic_corpus(&CorpusSpec { n_utterances: 1, seed, ..Default::default() }).unwrap();
            let mel = &data[0].mel;
            let base = extract_energy(mel).unwrap();
            let scaled = extract_energy(&mel.scaled(c)).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a * c - b).abs() <= 1e-5 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn accuracies_are_fractions(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..30)) {
            let preds: Vec<_> = pairs.iter().map(|(p, _)| labels(0, *p, 0, 0, 0)).collect();
            let truth: Vec<_> = pairs.iter().map(|(_, l)| labels(0, *l, 0, 0, 0)).collect();
            let r = style_accuracy(&preds, &truth).unwrap();
            prop_assert!(r.per_factor.values().all(|a| (0.0..=1.0).contains(a)));
            let m = r.per_factor.values().sum::<f64>() / r.per_factor.len() as f64;
            prop_assert!((r.mean - m).abs() < 1e-12);
        }
    }
}
