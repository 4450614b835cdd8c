use std::f64::consts::PI;

use fmaml_core::audio::*;
use proptest::prelude::*;

fn tone(freq: f64, secs: f64) -> Waveform {
    let n = (secs * 16000.0) as usize;
    Waveform::new((0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect(), 16000).unwrap()
}

/// Naive O(N²) one-sided power spectrum of a zero-padded frame.
fn dft_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &x) in frame.iter().enumerate() {
                let ang = -2.0 * PI * (k * t) as f64 / n_fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Triangular HTK-mel filters written out from the textbook definition.
fn oracle_filters(n_mels: usize, n_fft: usize, rate: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| inv(top * i as f64 / (n_mels + 1) as f64)).collect();
    let filters = (0..n_mels)
        .map(|m| {
            (0..=n_fft / 2)
                .map(|k| {
                    let f = k as f64 * rate / n_fft as f64;
                    let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                    if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    (edges[1..=n_mels].to_vec(), filters)
}

#[test]
fn tone_peaks_in_nearest_filter_and_matches_dft_oracle() {
    let cfg = MfccConfig::default();
    let wave = tone(1000.0, 0.2);
    let frames = windowed_frames(&wave, &cfg).unwrap();
    let energies = mel_energies(&wave, &cfg).unwrap();
    let (centers, filters) = oracle_filters(40, 512, 16000.0);
    let nearest = (0..40)
        .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
        .unwrap();
    for (frame, got) in frames.iter().zip(&energies) {
        let p = dft_power(frame, 512);
        let want: Vec<f64> = filters.iter().map(|f| f.iter().zip(&p).map(|(a, b)| a * b).sum()).collect();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&want), nearest);
        assert_eq!(argmax(got), nearest);
        let scale = want.iter().cloned().fold(0.0, f64::max);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
        }
    }
    assert_eq!(filter_centers_hz(&cfg, 16000)[nearest], centers[nearest]);
}

#[test]
fn zero_signal_gives_constant_frames() {
    let cfg = MfccConfig::default();
    let m = mfcc(&Waveform::new(vec![0.0; 8000], 16000).unwrap(), &cfg).unwrap();
    let t = m.shape()[1];
    let d = m.data();
    let c0 = (40.0f64).sqrt() * cfg.log_floor.ln();
    for j in 0..t {
        assert!((d[j] - c0).abs() < 1e-9);
        for k in 1..40 {
            assert!(d[k * t + j].abs() < 1e-9);
        }
    }
}

#[test]
fn parseval_holds_for_windowed_frames() {
    let cfg = MfccConfig::default();
    let wave = synth_neutral(Some(0.3), 5).unwrap();
    let frames = windowed_frames(&wave, &cfg).unwrap();
    let spectra = frame_power_spectra(&wave, &cfg).unwrap();
    let n = cfg.n_fft;
    for (f, p) in frames.iter().zip(&spectra) {
        let time: f64 = f.iter().map(|x| x * x).sum();
        let freq = (p[0] + p[n / 2] + 2.0 * p[1..n / 2].iter().sum::<f64>()) / n as f64;
        assert!((time - freq).abs() <= 1e-6 * time.max(1e-300));
    }
}

#[test]
fn paper_framing_gives_348_frames() {
    let wave = Waveform::new(vec![0.01; 56000], 16000).unwrap();
    assert_eq!(mfcc(&wave, &MfccConfig::default()).unwrap().shape(), &[40, 348]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frame_count_formula(len in 480usize..4000, frame_ms in 10u32..32, step_ms in 5u32..20) {
        let cfg = MfccConfig { frame_len: frame_ms as f64 / 1000.0, frame_step: step_ms as f64 / 1000.0, ..MfccConfig::default() };
        let frame = cfg.frame_samples(16000);
        prop_assume!(len >= frame);
        let w = Waveform::new((0..len).map(|i| ((i * 13) % 7) as f64 / 10.0).collect(), 16000).unwrap();
        let m = mfcc(&w, &cfg).unwrap();
        prop_assert_eq!(m.shape()[1], 1 + (len - frame) / cfg.step_samples(16000));
    }

    #[test]
    fn mfcc_is_pure(seed in 0u64..1000) {
        let w = synth_neutral(Some(0.1), seed).unwrap();
        let cfg = MfccConfig::default();
        prop_assert_eq!(mfcc(&w, &cfg).unwrap(), mfcc(&w, &cfg).unwrap());
    }
}

#[test]
fn silence_stays_tiny_over_1000_seeds() {
    let mut worst = 0.0f64;
    for seed in 0..1000 {
        let w = synth_silence(None, seed).unwrap();
        worst = w.samples().iter().fold(worst, |m, s| m.max(s.abs()));
    }
    assert!(worst < 1e-2, "max |sample| = {worst}");
}

#[test]
fn neutral_loudness_and_fundamental() {
    for seed in 0..100 {
        let w = synth_neutral(Some(0.5), seed).unwrap();
        let rms = w.rms();
        assert!((0.05..=0.5).contains(&rms), "rms {rms}");
        assert!(w.samples().iter().all(|s| s.abs() <= 1.0));
    }
    // 1 s of signal: integer-Hz DFT bins from 50 Hz to 1 kHz
    let w = synth_neutral(Some(1.0), 3).unwrap();
    let x = &w.samples()[..16000];
    let mag = |f: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &s) in x.iter().enumerate() {
            let a = 2.0 * PI * (f * t) as f64 / 16000.0;
            re += s * a.cos();
            im -= s * a.sin();
        }
        re * re + im * im
    };
    let peak = (50..=1000).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
    assert_eq!(peak, 120);
}

#[test]
fn synthesizers_are_deterministic() {
    assert_eq!(synth_silence(None, 11).unwrap(), synth_silence(None, 11).unwrap());
    assert_eq!(synth_neutral(None, 11).unwrap(), synth_neutral(None, 11).unwrap());
    let spec = CorpusSpec::uniform(&["l1"], &["fear", "anger"], 2, 4);
    let cfg = MfccConfig::default();
    assert_eq!(synth_emotion_corpus(&spec, &cfg).unwrap(), synth_emotion_corpus(&spec, &cfg).unwrap());
}

#[test]
fn english_table_counts_give_341_clips() {
    let mut spec = CorpusSpec::table1(0);
    spec.languages.truncate(1);
    spec.clips_per_emotion.truncate(1);
    let clips = synth_emotion_corpus(&spec, &MfccConfig::default()).unwrap();
    assert_eq!(clips.len(), 341);
    let count = |e: &str| clips.iter().filter(|c| c.emotion == e).count();
    assert_eq!(
        CANONICAL_EMOTIONS.map(count),
        [72, 50, 69, 76, 74]
    );
    assert!(clips.iter().all(|c| c.language == "english" && c.mfcc.shape()[0] == 40));
}

/// Logistic regression on standardised time-averaged MFCC vectors.
fn logistic_accuracy(train: &[(Vec<f64>, f64)], test: &[(Vec<f64>, f64)]) -> f64 {
    let d = train[0].0.len();
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|(x, _)| x[j]).sum::<f64>() / train.len() as f64).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (train.iter().map(|(x, _)| (x[j] - mean[j]).powi(2)).sum::<f64>() / train.len() as f64).sqrt().max(1e-9))
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect() };
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..500 {
        let (mut gw, mut gb) = (vec![0.0; d], 0.0);
        for (x, y) in train {
            let zx = z(x);
            let p = 1.0 / (1.0 + (-(zx.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b)).exp());
            for j in 0..d {
                gw[j] += (p - y) * zx[j];
            }
            gb += p - y;
        }
        for j in 0..d {
            w[j] -= 0.1 * gw[j] / train.len() as f64;
        }
        b -= 0.1 * gb / train.len() as f64;
    }
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let s: f64 = z(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (s > 0.0) == (*y > 0.5)
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn two_emotions_are_linearly_separable_on_mean_mfcc() {
    let cfg = MfccConfig::default();
    let mut data = Vec::new();
    for (label, name) in [(0.0, "fear"), (1.0, "sadness")] {
        let profile = EmotionProfile::for_emotion(name, 0, 5);
        for i in 0..40u64 {
            let m = mfcc(&emotion_waveform(&profile, 0.0, 1000 * label as u64 + i).unwrap(), &cfg).unwrap();
            let t = m.shape()[1];
            let mean: Vec<f64> = m.data().chunks(t).map(|r| r.iter().sum::<f64>() / t as f64).collect();
            data.push((i, mean, label));
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = data.into_iter().partition(|(i, _, _)| i % 2 == 0);
    let strip = |v: Vec<(u64, Vec<f64>, f64)>| v.into_iter().map(|(_, x, y)| (x, y)).collect::<Vec<_>>();
    let acc = logistic_accuracy(&strip(train), &strip(test));
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn fixed_pool_is_labelled_and_shared() {
    let pool = synth_fixed_pool(3, 9, &MfccConfig::default()).unwrap();
    assert_eq!(pool.len(), 6);
    assert!(pool[..3].iter().all(|c| c.emotion == SILENCE && c.language == SHARED_LANGUAGE));
    assert!(pool[3..].iter().all(|c| c.emotion == NEUTRAL && c.is_fixed()));
}

#[test]
fn corpus_directory_round_trip_with_cache() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    for (lang, emo, seed) in [("en", "anger", 1u64), ("en", "fear", 2), ("it", "anger", 3)] {
        std::fs::create_dir_all(root.join(lang).join(emo)).unwrap();
        write_wav(&root.join(lang).join(emo).join("c0.wav"), &synth_neutral(Some(0.4), seed).unwrap()).unwrap();
    }
    std::fs::write(root.join("en").join("fear").join("notes.txt"), "ignored").unwrap();
    let cache = dir.path().join("cache");
    let cfg = MfccConfig::default();
    let first = load_corpus_dir(&root, &cfg, Some(&cache)).unwrap();
    let ids: Vec<&str> = first.iter().map(|c| c.source_id.as_str()).collect();
    assert_eq!(ids, vec!["en/anger/c0", "en/fear/c0", "it/anger/c0"]);
    assert!(cache.join("en").join("anger").join("c0.f64").exists());
    let second = load_corpus_dir(&root, &cfg, Some(&cache)).unwrap();
    assert_eq!(first, second);
    assert!(load_corpus_dir(&dir.path().join("missing"), &cfg, None).is_err());
}
