//! MFCC front-end: pre-emphasis → framing → window → |FFT|² → triangular
//! HTK-mel filterbank (0 Hz to Nyquist) → log with floor → orthonormal DCT-II.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hamming,
    Rectangular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    /// Seconds.
    pub frame_len: f64,
    /// Seconds.
    pub frame_step: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub window: Window,
    pub log_floor: f64,
    pub preemphasis: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            n_mfcc: 40,
            frame_len: 0.030,
            frame_step: 0.010,
            n_fft: 512,
            n_mels: 40,
            window: Window::Hamming,
            log_floor: 1e-10,
            preemphasis: 0.97,
        }
    }
}

impl MfccConfig {
    pub fn frame_samples(&self, rate: u32) -> usize {
        (self.frame_len * rate as f64).round() as usize
    }

    pub fn step_samples(&self, rate: u32) -> usize {
        (self.frame_step * rate as f64).round() as usize
    }

    pub fn validate(&self, rate: u32) -> Result<()> {
        let frame = self.frame_samples(rate);
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::invalid(format!("n_mfcc {} must be in 1..={}", self.n_mfcc, self.n_mels)));
        }
        if frame == 0 || self.step_samples(rate) == 0 || frame > self.n_fft {
            return Err(Error::invalid(format!(
                "frame of {frame} samples must be positive and fit n_fft {}",
                self.n_fft
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::invalid("log_floor must be positive"));
        }
        Ok(())
    }
}

/// `1 + ⌊(len − frame) / step⌋`, or `None` when the clip is shorter than a frame.
pub fn frame_count(len: usize, frame: usize, step: usize) -> Option<usize> {
    (len >= frame && step > 0).then(|| 1 + (len - frame) / step)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn mel_points_hz(n_mels: usize, rate: u32) -> Vec<f64> {
    let top = hz_to_mel(rate as f64 / 2.0);
    (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect()
}

/// Centre frequency of each mel filter.
pub fn filter_centers_hz(cfg: &MfccConfig, rate: u32) -> Vec<f64> {
    mel_points_hz(cfg.n_mels, rate)[1..=cfg.n_mels].to_vec()
}

/// Triangular filters over the `n_fft/2 + 1` one-sided bins, unit peak.
pub fn mel_filterbank(cfg: &MfccConfig, rate: u32) -> Vec<Vec<f64>> {
    let pts = mel_points_hz(cfg.n_mels, rate);
    let bins = cfg.n_fft / 2 + 1;
    let bin_hz = rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II rows `0..n_out` for inputs of length `n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    let n = n_in as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..n_in)
                .map(|i| scale * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .collect()
        })
        .collect()
}

fn window(kind: Window, len: usize) -> Vec<f64> {
    match kind {
        Window::Rectangular => vec![1.0; len],
        Window::Hamming if len == 1 => vec![1.0],
        Window::Hamming => (0..len)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (len - 1) as f64).cos())
            .collect(),
    }
}

/// Pre-emphasised, windowed frames (each `frame_len · rate` samples).
pub fn windowed_frames(wave: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let rate = wave.sample_rate();
    cfg.validate(rate)?;
    let (frame, step) = (cfg.frame_samples(rate), cfg.step_samples(rate));
    let x = wave.samples();
    let t = frame_count(x.len(), frame, step).ok_or(Error::ClipTooShort { len: x.len(), frame })?;
    let mut emph = Vec::with_capacity(x.len());
    emph.push(x[0]);
    emph.extend(x.windows(2).map(|w| w[1] - cfg.preemphasis * w[0]));
    let win = window(cfg.window, frame);
    Ok((0..t)
        .map(|i| emph[i * step..i * step + frame].iter().zip(&win).map(|(s, w)| s * w).collect())
        .collect())
}

/// One-sided power spectrum `|X_k|²`, `k = 0..=n_fft/2`, per frame.
pub fn frame_power_spectra(wave: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let frames = windowed_frames(wave, cfg)?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    Ok(frames
        .iter()
        .map(|f| {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &s) in buf.iter_mut().zip(f) {
                c.re = s;
            }
            fft.process(&mut buf);
            buf[..=cfg.n_fft / 2].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect())
}

/// Mel filterbank energies (before the log), `[frames][n_mels]`.
pub fn mel_energies(wave: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let bank = mel_filterbank(cfg, wave.sample_rate());
    Ok(frame_power_spectra(wave, cfg)?
        .iter()
        .map(|p| bank.iter().map(|f| f.iter().zip(p).map(|(a, b)| a * b).sum()).collect())
        .collect())
}

/// MFCC matrix `[n_mfcc × T]`.
pub fn mfcc(wave: &Waveform, cfg: &MfccConfig) -> Result<Tensor> {
    let energies = mel_energies(wave, cfg)?;
    let dct = dct_matrix(cfg.n_mfcc, cfg.n_mels);
    let t = energies.len();
    let mut out = vec![0.0; cfg.n_mfcc * t];
    for (j, e) in energies.iter().enumerate() {
        let logs: Vec<f64> = e.iter().map(|v| v.max(cfg.log_floor).ln()).collect();
        for (k, row) in dct.iter().enumerate() {
            out[k * t + j] = row.iter().zip(&logs).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![cfg.n_mfcc, t], out)
}
