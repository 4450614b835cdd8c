//! Leave-one-language-out experiment runner.
//!
//! One run meta-trains each meta-learning method once on the source
//! languages, then fine-tunes and evaluates it on the target language at
//! every shot count; the supervised baseline trains from scratch per trial.
//! Failures are recorded per cell and the remaining cells still run.
//!
//! Outputs in `output_dir`: `report.json`, `tables.csv`, `tables.txt`,
//! `trace_<method>.csv` and `checkpoint_<method>.bin`.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

pub use config::{parse_config, ExperimentConfig, Method, Overrides, Profile, SYNTHETIC};
pub use report::{
    emit_language_table, emit_tables, first_crossing, parse_tables_csv, percent, smooth, trace_csv, trace_points, CellReport,
    CellStatus, ExperimentReport, Metadata, ParsedTable, Timing, TracePoint, MISSING, REPORT_FORMAT,
};

use crate::audio::{load_corpus_dir, synth_emotion_corpus, synth_fixed_pool, CorpusSpec, FeatureClip, MfccConfig};
use crate::episodes::{register_corpus, DatasetRegistry};
use crate::error::{Error, Result};
use crate::meta::{meta_train, run_protocol, save_checkpoint, Learner, TrainTrace};
use crate::model::Model;
use crate::rng::derive_seed;

/// Environment variable naming the MFCC feature cache directory.
pub const CACHE_ENV: &str = "FMAML_CACHE_DIR";

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Clips for `cfg.corpus`: the synthetic stand-in, or a WAV directory. A
/// directory without silence/neutral clips gets the synthetic fixed pool.
pub fn load_clips(cfg: &ExperimentConfig) -> Result<(Vec<FeatureClip>, Vec<String>)> {
    let mfcc = MfccConfig::default();
    let mut notes = Vec::new();
    let mut clips = if cfg.is_synthetic() {
        synth_emotion_corpus(&CorpusSpec::table1(cfg.corpus_seed), &mfcc)?
    } else {
        let cache = cache_dir();
        if let Some(c) = &cache {
            notes.push(format!("feature cache: {}", c.display()));
        }
        load_corpus_dir(Path::new(&cfg.corpus), &mfcc, cache.as_deref())?
    };
    if cfg.episodes.n_fixed > 0 && !clips.iter().any(FeatureClip::is_fixed) {
        let seed = derive_seed(cfg.corpus_seed, "fixed-pool", 0);
        clips.extend(synth_fixed_pool(cfg.fixed_pool_per_class, seed, &mfcc)?);
        if !cfg.is_synthetic() {
            notes.push("silence/neutral clips synthesised (corpus has none)".into());
        }
    }
    Ok((clips, notes))
}

/// Registry for `cfg`; reusable across configs that share the corpus,
/// corpus seed and input shape.
pub fn prepare_registry(cfg: &ExperimentConfig) -> Result<(DatasetRegistry, Vec<String>)> {
    let (clips, notes) = load_clips(cfg)?;
    Ok((register_corpus(clips, &cfg.input)?, notes))
}

/// Source languages after removing the target, plus a note about it.
pub fn source_languages(cfg: &ExperimentConfig, reg: &DatasetRegistry) -> Result<(Vec<String>, Vec<String>)> {
    let available = reg.languages();
    if !available.contains(&cfg.target_language) {
        return Err(Error::Config(format!("target language `{}` not in corpus {available:?}", cfg.target_language)));
    }
    let requested = cfg.source_languages.clone().unwrap_or_else(|| available.clone());
    let mut notes = Vec::new();
    if let Some(bad) = requested.iter().find(|l| !available.contains(l)) {
        return Err(Error::Config(format!("source language `{bad}` not in corpus {available:?}")));
    }
    if requested.contains(&cfg.target_language) {
        notes.push(format!("target language `{}` excluded from the source languages", cfg.target_language));
    }
    let mut sources: Vec<String> = requested.into_iter().filter(|l| *l != cfg.target_language).collect();
    sources.sort();
    sources.dedup();
    if sources.is_empty() && cfg.variants.iter().any(|m| m.variant().is_some()) {
        return Err(Error::Config("no source languages left for meta-training".into()));
    }
    Ok((sources, notes))
}

/// Progress messages during a run.
pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

/// Loads the corpus, runs the grid and writes every output file.
pub fn run_experiment(cfg: &ExperimentConfig, progress: Progress<'_>) -> Result<ExperimentReport> {
    let (start, started) = (Instant::now(), now_ms());
    progress(&format!("loading corpus `{}`", cfg.corpus));
    let (reg, notes) = prepare_registry(cfg)?;
    let corpus_secs = start.elapsed().as_secs_f64();
    let mut report = run_with_registry(cfg, &reg, notes, progress)?;
    report.timing.stages.insert("corpus".into(), corpus_secs);
    report.timing.started_unix_ms = started;
    write_outputs(&report, &cfg.output_dir)?;
    Ok(report)
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

struct Trained {
    method: Method,
    model: Result<Model>,
    trace: TrainTrace,
    secs: f64,
}

/// Runs the grid against a prepared registry; writes checkpoints into
/// `cfg.output_dir` but no report files.
pub fn run_with_registry(
    cfg: &ExperimentConfig,
    reg: &DatasetRegistry,
    mut notes: Vec<String>,
    progress: Progress<'_>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = now_ms();
    let (sources, more) = source_languages(cfg, reg)?;
    notes.extend(more);
    std::fs::create_dir_all(&cfg.output_dir)?;

    let meta_methods: Vec<Method> = cfg.variants.iter().copied().filter(|m| m.variant().is_some()).collect();
    let train_one = |&method: &Method| -> Trained {
        let t0 = Instant::now();
        let tc = cfg.train_for(method.variant().expect("meta method"));
        progress(&format!("meta-training {} ({} iterations)", method.name(), tc.meta_iters));
        let result = meta_train(reg, &cfg.episodes, &sources, &cfg.model, &tc);
        let (model, trace) = match result {
            Ok((m, t)) => (Ok(m), t),
            Err(e) => (Err(e), TrainTrace::default()),
        };
        Trained { method, model, trace, secs: t0.elapsed().as_secs_f64() }
    };
    reg.take_audit();
    let trained: Vec<Trained> =
        if cfg.parallel_cells { meta_methods.par_iter().map(train_one).collect() } else { meta_methods.iter().map(train_one).collect() };
    let touched = reg.take_audit();
    if touched.contains(&cfg.target_language) {
        return Err(Error::Corpus(format!("meta-training read the target language `{}`", cfg.target_language)));
    }

    let mut timing = Timing::default();
    let mut traces = BTreeMap::new();
    let mut models: BTreeMap<Method, std::result::Result<Model, String>> = BTreeMap::new();
    for t in trained {
        timing.stages.insert(format!("train/{}", t.method.name()), t.secs);
        if !t.trace.is_empty() {
            let ms = t.trace.rows.iter().map(|r| r.wall_ms).sum::<f64>() / t.trace.len() as f64;
            timing.mean_iter_ms.insert(t.method.name().into(), ms);
        }
        traces.insert(t.method.name().to_string(), trace_points(&t.trace));
        let model = match t.model {
            Ok(m) => {
                let path = cfg.output_dir.join(format!("checkpoint_{}.bin", t.method.name()));
                save_checkpoint(&path, &m, &cfg.hash(), cfg.seed)?;
                Ok(m)
            }
            Err(e) => {
                progress(&format!("{} meta-training failed: {e}", t.method.name()));
                Err(e.to_string())
            }
        };
        models.insert(t.method, model);
    }

    let grid: Vec<(Method, usize)> = cfg.variants.iter().flat_map(|&m| cfg.k_shots.iter().map(move |&k| (m, k))).collect();
    let run_cell = |&(method, k): &(Method, usize)| -> (CellReport, f64) {
        let t0 = Instant::now();
        progress(&format!("evaluating {} at K={k} ({} trials)", method.name(), cfg.trials));
        let spec = cfg.spec_for(k);
        let outcome = match method.variant() {
            None => run_protocol(reg, &spec, &cfg.target_language, Learner::Supervised, &cfg.model, &cfg.train, cfg.trials, cfg.eval_per_label)
                .map_err(|e| e.to_string()),
            Some(v) => match &models[&method] {
                Ok(model) => run_protocol(
                    reg,
                    &spec,
                    &cfg.target_language,
                    Learner::Meta(model),
                    &cfg.model,
                    &cfg.train_for(v),
                    cfg.trials,
                    cfg.eval_per_label,
                )
                .map_err(|e| e.to_string()),
                Err(e) => Err(format!("meta-training failed: {e}")),
            },
        };
        let cell = match outcome {
            Ok(r) => CellReport::ok(method, k, r),
            Err(e) => CellReport::failed(method, k, e),
        };
        (cell, t0.elapsed().as_secs_f64())
    };
    let results: Vec<(CellReport, f64)> =
        if cfg.parallel_cells { grid.par_iter().map(run_cell).collect() } else { grid.iter().map(run_cell).collect() };
    let mut cells = Vec::with_capacity(results.len());
    for (cell, secs) in results {
        timing.stages.insert(format!("protocol/{}/{}", cell.method.name(), cell.k_shot), secs);
        cells.push(cell);
    }
    timing.started_unix_ms = started;
    timing.finished_unix_ms = now_ms();

    Ok(ExperimentReport {
        format: REPORT_FORMAT.into(),
        metadata: Metadata {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            corpus_fingerprint: reg.fingerprint(),
            target_language: cfg.target_language.clone(),
            source_languages: sources,
            meta_iters: cfg.train.meta_iters,
            notes,
            version: env!("CARGO_PKG_VERSION").into(),
        },
        config: cfg.clone(),
        cells,
        traces,
        timing,
    })
}

/// Writes `report.json`, `tables.csv`, `tables.txt` and the trace CSVs.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    match emit_tables(report) {
        Ok((text, csv)) => {
            std::fs::write(dir.join("tables.csv"), csv)?;
            std::fs::write(dir.join("tables.txt"), text)?;
        }
        Err(Error::Report(_)) => {}
        Err(e) => return Err(e),
    }
    for (name, points) in &report.traces {
        std::fs::write(dir.join(format!("trace_{name}.csv")), trace_csv(points))?;
    }
    Ok(())
}
