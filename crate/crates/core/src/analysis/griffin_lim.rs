//! Mel-to-waveform fallback: approximate mel inversion followed by
//! Griffin-Lim phase reconstruction.
//!
//! Frames are centered: frame `f` covers samples `f * hop - n_fft / 2 ..`
//! with zeros outside the signal, so `F` frames map to `F * hop` samples.
//! Mel values are treated as linear magnitudes under an HTK-scale
//! triangular filterbank.

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::corpus::{MelConfig, MelSpectrogram};
use crate::error::{Error, Result};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `[mel_bins][n_fft / 2 + 1]`, spanning 0 Hz to Nyquist.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f32>> {
    let n_freq = cfg.n_fft / 2 + 1;
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let edges: Vec<f64> =
        (0..cfg.mel_bins + 2).map(|i| mel_to_hz(top * i as f64 / (cfg.mel_bins + 1) as f64)).collect();
    (0..cfg.mel_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_freq)
                .map(|k| {
                    let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f32> {
    (0..n).map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32).collect()
}

struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl Stft {
    fn new(n_fft: usize, hop: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    fn start(&self, f: usize) -> isize {
        (f * self.hop) as isize - (self.n_fft / 2) as isize
    }

    fn analyze(&self, wave: &[f32], frames: usize) -> Vec<Vec<Complex32>> {
        (0..frames)
            .map(|f| {
                let s = self.start(f);
                let mut buf: Vec<Complex32> = (0..self.n_fft)
                    .map(|i| {
                        let j = s + i as isize;
                        let x = if j >= 0 && (j as usize) < wave.len() { wave[j as usize] } else { 0.0 };
                        Complex32::new(x * self.window[i], 0.0)
                    })
                    .collect();
                self.forward.process(&mut buf);
                buf.truncate(self.n_fft / 2 + 1);
                buf
            })
            .collect()
    }

    fn synthesize(&self, spec: &[Vec<Complex32>], len: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; len];
        let mut norm = vec![0.0f32; len];
        let half = self.n_fft / 2;
        for (f, col) in spec.iter().enumerate() {
            let mut buf = vec![Complex32::new(0.0, 0.0); self.n_fft];
            buf[..=half].copy_from_slice(&col[..=half]);
            for k in 1..half {
                buf[self.n_fft - k] = col[k].conj();
            }
            self.inverse.process(&mut buf);
            let s = self.start(f);
            for (i, c) in buf.iter().enumerate() {
                let j = s + i as isize;
                if j >= 0 && (j as usize) < len {
                    let w = self.window[i];
                    out[j as usize] += c.re / self.n_fft as f32 * w;
                    norm[j as usize] += w * w;
                }
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

/// Linear-magnitude STFT `[frames][n_fft / 2 + 1]` with `frames = len / hop`.
pub fn stft_magnitude(wave: &[f32], n_fft: usize, hop: usize) -> Vec<Vec<f32>> {
    let stft = Stft::new(n_fft, hop);
    stft.analyze(wave, wave.len() / hop).into_iter().map(|c| c.iter().map(|z| z.norm()).collect()).collect()
}

/// Mel magnitudes of a waveform under `cfg`.
pub fn mel_from_waveform(wave: &[f32], cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    let fb = mel_filterbank(cfg);
    let mag = stft_magnitude(wave, cfg.n_fft, cfg.hop);
    let data =
        mag.iter().flat_map(|col| fb.iter().map(move |w| w.iter().zip(col).map(|(a, b)| a * b).sum::<f32>())).collect();
    MelSpectrogram::new(mag.len(), cfg.mel_bins, data)
}

/// Griffin-Lim from a linear magnitude spectrogram `[frames][n_fft / 2 + 1]`,
/// starting from zero phase.
pub fn griffin_lim_magnitude(mag: &[Vec<f32>], n_fft: usize, hop: usize, n_iters: usize) -> Result<Vec<f32>> {
    if n_iters < 1 {
        return Err(Error::Input("griffin-lim needs at least one iteration".into()));
    }
    if hop == 0 || hop >= n_fft {
        return Err(Error::Config(format!("hop {hop} must be in 1..{n_fft}")));
    }
    let n_freq = n_fft / 2 + 1;
    if let Some(col) = mag.iter().find(|c| c.len() != n_freq) {
        return Err(Error::Shape(format!("magnitude column has {} bins, need {n_freq}", col.len())));
    }
    let stft = Stft::new(n_fft, hop);
    let len = mag.len() * hop;
    let mut spec: Vec<Vec<Complex32>> =
        mag.iter().map(|c| c.iter().map(|&m| Complex32::new(m, 0.0)).collect()).collect();
    let mut wave = stft.synthesize(&spec, len);
    for _ in 1..n_iters {
        let est = stft.analyze(&wave, mag.len());
        for (col, (e, m)) in spec.iter_mut().zip(est.iter().zip(mag)) {
            for (z, (ez, &mk)) in col.iter_mut().zip(e.iter().zip(m)) {
                let n = ez.norm();
                *z = if n > 1e-12 { ez * (mk / n) } else { Complex32::new(mk, 0.0) };
            }
        }
        wave = stft.synthesize(&spec, len);
    }
    Ok(wave)
}

/// Waveform of `frames * hop` samples for a mel produced under `cfg`.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &MelConfig, n_iters: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    if mel.bins != cfg.mel_bins {
        return Err(Error::Shape(format!("mel has {} bins, config expects {}", mel.bins, cfg.mel_bins)));
    }
    let fb = mel_filterbank(cfg);
    let n_freq = cfg.n_fft / 2 + 1;
    let area: Vec<f32> = fb.iter().map(|w| w.iter().sum()).collect();
    let mut cover = vec![0.0f32; n_freq];
    for w in &fb {
        for (c, v) in cover.iter_mut().zip(w) {
            *c += v;
        }
    }
    let mag: Vec<Vec<f32>> = (0..mel.frames)
        .map(|f| {
            let frame = mel.frame(f);
            (0..n_freq)
                .map(|k| {
                    if cover[k] <= 1e-6 {
                        return 0.0;
                    }
                    let s: f32 = fb
                        .iter()
                        .zip(frame)
                        .zip(&area)
                        .filter(|(_, a)| **a > 1e-6)
                        .map(|((w, m), a)| w[k] * m.max(0.0) / a)
                        .sum();
                    s / cover[k]
                })
                .collect()
        })
        .collect();
    griffin_lim_magnitude(&mag, cfg.n_fft, cfg.hop, n_iters)
}
