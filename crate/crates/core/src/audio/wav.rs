use std::path::Path;

use super::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Wav { path: path.to_path_buf(), reason: reason.into() }
}

/// Reads a 16-bit PCM WAV, averages channels, and resamples to 16 kHz.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(wav_err(path, "missing file"));
    }
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => wav_err(path, format!("io: {io}")),
        hound::Error::FormatError(m) => wav_err(path, format!("malformed RIFF header: {m}")),
        hound::Error::Unsupported => wav_err(path, "unsupported codec"),
        other => wav_err(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!("unsupported codec: {:?} {}-bit (need 16-bit PCM)", spec.sample_format, spec.bits_per_sample),
        ));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_err(path, format!("truncated data: {e}")))?;
    if raw.len() < channels {
        return Err(wav_err(path, "no audio frames"));
    }
    let mono: Vec<f64> = raw
        .chunks_exact(channels)
        .map(|f| f.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    let samples = if spec.sample_rate == DEFAULT_SAMPLE_RATE {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, DEFAULT_SAMPLE_RATE)
    };
    Waveform::new(samples, DEFAULT_SAMPLE_RATE)
}

/// Linear-interpolation resampling; output length is `round(len · to / from)`.
pub fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let out_len = ((x.len() as f64) * to as f64 / from as f64).round().max(1.0) as usize;
    let step = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let j = t.floor() as usize;
            if j + 1 >= x.len() {
                return x[x.len() - 1];
            }
            let frac = t - j as f64;
            x[j] * (1.0 - frac) + x[j + 1] * frac
        })
        .collect()
}

/// Writes a mono 16-bit PCM WAV.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for &s in wave.samples() {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e.to_string()))?;
    }
    w.finalize().map_err(|e| wav_err(path, e.to_string()))
}
