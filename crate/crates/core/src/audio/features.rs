use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{load_wav, mfcc, MfccConfig, Waveform};
use crate::error::{Error, Result};
use crate::tensor::kernels::adaptive_bins;
use crate::tensor::Tensor;

pub const SILENCE: &str = "silence";
pub const NEUTRAL: &str = "neutral";
/// Fixed labels in output-slot order: silence, then neutral.
pub const FIXED_LABELS: [&str; 2] = [SILENCE, NEUTRAL];
/// Language tag of the language-independent fixed-class pool.
pub const SHARED_LANGUAGE: &str = "shared";

/// MFCC matrix of one utterance plus its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    /// `[n_mfcc × T]`, `T ≥ 1`.
    pub mfcc: Tensor,
    pub emotion: String,
    pub language: String,
    pub source_id: String,
}

impl FeatureClip {
    pub fn new(mfcc: Tensor, emotion: impl Into<String>, language: impl Into<String>, source_id: impl Into<String>) -> Result<Self> {
        match mfcc.shape() {
            [_, t] if *t >= 1 => {}
            s => return Err(Error::shape(format!("feature clip must be [n_mfcc × T≥1], got {s:?}"))),
        }
        Ok(FeatureClip { mfcc, emotion: emotion.into(), language: language.into(), source_id: source_id.into() })
    }

    pub fn frames(&self) -> usize {
        self.mfcc.shape()[1]
    }

    pub fn is_fixed(&self) -> bool {
        FIXED_LABELS.contains(&self.emotion.as_str())
    }
}

/// Subtracts each coefficient's mean over time.
pub fn cepstral_mean_normalize(m: &Tensor) -> Result<Tensor> {
    let [rows, cols] = *m.shape() else {
        return Err(Error::shape(format!("CMN expects a matrix, got {:?}", m.shape())));
    };
    let mut out = m.to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Tensor::new(vec![rows, cols], out)
}

/// MFCC followed by per-clip cepstral mean normalisation.
pub fn clip_features(wave: &Waveform, cfg: &MfccConfig) -> Result<Tensor> {
    cepstral_mean_normalize(&mfcc(wave, cfg)?)
}

/// Centre-crops or pads (evenly on both sides, with each row's mean) to
/// exactly `t_fixed` columns.
pub fn pad_or_crop(m: &Tensor, t_fixed: usize) -> Result<Tensor> {
    let [rows, cols] = *m.shape() else {
        return Err(Error::shape(format!("pad_or_crop expects a matrix, got {:?}", m.shape())));
    };
    if t_fixed == 0 {
        return Err(Error::invalid("t_fixed must be positive"));
    }
    let d = m.data();
    let mut out = Vec::with_capacity(rows * t_fixed);
    for r in 0..rows {
        let row = &d[r * cols..(r + 1) * cols];
        if cols >= t_fixed {
            let start = (cols - t_fixed) / 2;
            out.extend_from_slice(&row[start..start + t_fixed]);
        } else {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let left = (t_fixed - cols) / 2;
            out.extend(std::iter::repeat_n(mean, left));
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(mean, t_fixed - cols - left));
        }
    }
    Tensor::new(vec![rows, t_fixed], out)
}

/// Adaptive average pooling of a matrix to `h × w` (identity when equal).
pub fn fit_to(m: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [rows, cols] = *m.shape() else {
        return Err(Error::shape(format!("fit_to expects a matrix, got {:?}", m.shape())));
    };
    if rows == h && cols == w {
        return Ok(m.clone());
    }
    let (rb, cb) = (adaptive_bins(rows, h), adaptive_bins(cols, w));
    let d = m.data();
    let mut out = Vec::with_capacity(h * w);
    for &(r0, r1) in &rb {
        for &(c0, c1) in &cb {
            let mut s = 0.0;
            for r in r0..r1 {
                s += d[r * cols + c0..r * cols + c1].iter().sum::<f64>();
            }
            out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Binary cache: `u32 rows`, `u32 cols` (little-endian), then `rows·cols`
/// little-endian `f64` values, row-major.
pub fn write_feature_cache(path: &Path, m: &Tensor) -> Result<()> {
    let [rows, cols] = *m.shape() else {
        return Err(Error::shape(format!("feature cache holds matrices, got {:?}", m.shape())));
    };
    let mut buf = Vec::with_capacity(8 + 8 * m.len());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Corpus(format!("{}: truncated feature cache header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(Error::Corpus(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            rows * cols,
            body.len()
        )));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(vec![rows, cols], data)
}

fn sorted_dirs(p: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(p)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `root/<language>/<emotion>/<clip>.wav` in sorted order. When
/// `cache_dir` is given, features are read from / written to
/// `<cache_dir>/<language>/<emotion>/<clip>.f64`.
pub fn load_corpus_dir(root: &Path, cfg: &MfccConfig, cache_dir: Option<&Path>) -> Result<Vec<FeatureClip>> {
    if !root.is_dir() {
        return Err(Error::Corpus(format!("{} is not a directory", root.display())));
    }
    let mut clips = Vec::new();
    for lang_dir in sorted_dirs(root)? {
        let language = name_of(&lang_dir);
        for emo_dir in sorted_dirs(&lang_dir)? {
            let emotion = name_of(&emo_dir);
            let mut wavs: Vec<PathBuf> = fs::read_dir(&emo_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            wavs.sort();
            for wav in wavs {
                let stem = wav.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let source_id = format!("{language}/{emotion}/{stem}");
                let cached = cache_dir.map(|d| d.join(&language).join(&emotion).join(format!("{stem}.f64")));
                let feats = match &cached {
                    Some(c) if c.exists() => read_feature_cache(c)?,
                    _ => {
                        let f = clip_features(&load_wav(&wav)?, cfg)?;
                        if let Some(c) = &cached {
                            if let Some(parent) = c.parent() {
                                fs::create_dir_all(parent)?;
                            }
                            write_feature_cache(c, &f)?;
                        }
                        f
                    }
                };
                clips.push(FeatureClip::new(feats, emotion.clone(), language.clone(), source_id)?);
            }
        }
    }
    if clips.is_empty() {
        return Err(Error::Corpus(format!("no .wav clips under {}", root.display())));
    }
    Ok(clips)
}
