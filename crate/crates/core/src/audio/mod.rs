//! Audio ingestion, MFCC features, and synthetic stand-ins for the corpus.

mod features;
mod mfcc;
mod synth;
mod wav;

use crate::error::{Error, Result};

pub use features::{
    cepstral_mean_normalize, clip_features, fit_to, load_corpus_dir, pad_or_crop, read_feature_cache,
    write_feature_cache, FeatureClip, FIXED_LABELS, NEUTRAL, SHARED_LANGUAGE, SILENCE,
};
pub use mfcc::{dct_matrix, filter_centers_hz, frame_count, frame_power_spectra, hz_to_mel, mel_filterbank, mel_energies, mel_to_hz, mfcc, windowed_frames, MfccConfig, Window};
pub use synth::{
    emotion_waveform, synth_corpus_waves, synth_emotion_corpus, synth_fixed_pool, synth_fixed_waves, synth_neutral, synth_silence,
    CorpusSpec, EmotionProfile, SynthClip, CANONICAL_EMOTIONS,
};
pub use wav::{load_wav, resample_linear, write_wav};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono PCM signal with samples in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if let Some(bad) = samples.iter().find(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}
