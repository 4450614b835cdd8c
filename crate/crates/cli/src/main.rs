//! `fmaml` — run few-shot emotion-recognition experiments from a config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fmaml_core::audio::{load_corpus_dir, synth_corpus_waves, synth_fixed_waves, write_wav, CorpusSpec, MfccConfig};
use fmaml_core::harness::{self, emit_language_table, emit_tables, ExperimentReport, Overrides, Profile};
use fmaml_core::rng::derive_seed;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "fmaml", version, about = "Few-shot meta-learning for cross-lingual speech emotion recognition")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// smoke | paper
        #[arg(long)]
        profile: Option<Profile>,
    },
    /// Write the synthetic corpus as WAV files: <dir>/<language>/<emotion>/<id>.wav.
    Synth {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Clips per (language, emotion); default is the three-language table.
        #[arg(long)]
        clips_per_emotion: Option<usize>,
        /// Silence and neutral clips each, written under `shared/`.
        #[arg(long, default_value_t = 100)]
        fixed_per_class: usize,
    },
    /// Precompute the MFCC cache for a WAV corpus directory.
    Features {
        corpus: PathBuf,
        /// Cache directory (default: $FMAML_CACHE_DIR).
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Re-render tables from one or more report.json files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Shot count for the per-language table (several reports).
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Also write tables.csv / tables.txt here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Run { config, seed, output_dir, profile } => run(&config, Overrides { seed, output_dir, profile }),
        Command::Synth { output_dir, seed, clips_per_emotion, fixed_per_class } => {
            synth(&output_dir, seed, clips_per_emotion, fixed_per_class)
        }
        Command::Features { corpus, cache_dir } => features(&corpus, cache_dir),
        Command::Report { reports, k, output_dir } => report(&reports, k, output_dir.as_deref()),
    }
}

fn run(config: &Path, overrides: Overrides) -> Result<()> {
    let cfg = harness::parse_config(config, &overrides)?;
    eprintln!("config {} (hash {})", config.display(), &cfg.hash()[..12]);
    let report = harness::run_experiment(&cfg, &|msg: &str| eprintln!("  {msg}"))?;
    for note in &report.metadata.notes {
        eprintln!("note: {note}");
    }
    for cell in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("{} K={} failed: {}", cell.method.name(), cell.k_shot, cell.error.as_deref().unwrap_or(""));
    }
    match emit_tables(&report) {
        Ok((text, _)) => print!("{text}"),
        Err(e) => eprintln!("no table: {e}"),
    }
    eprintln!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn synth(dir: &Path, seed: u64, clips: Option<usize>, fixed: usize) -> Result<()> {
    let spec = match clips {
        Some(n) => {
            let t = CorpusSpec::table1(seed);
            let langs: Vec<&str> = t.languages.iter().map(String::as_str).collect();
            let emos: Vec<&str> = t.emotions.iter().map(String::as_str).collect();
            CorpusSpec::uniform(&langs, &emos, n, seed)
        }
        None => CorpusSpec::table1(seed),
    };
    let mut all = synth_corpus_waves(&spec)?;
    all.extend(synth_fixed_waves(fixed, derive_seed(seed, "fixed-pool", 0))?);
    for c in &all {
        let path = dir.join(format!("{}.wav", c.source_id));
        std::fs::create_dir_all(path.parent().expect("clip path has a parent"))?;
        write_wav(&path, &c.wave).with_context(|| format!("writing {}", path.display()))?;
    }
    eprintln!("wrote {} clips to {}", all.len(), dir.display());
    Ok(())
}

fn features(corpus: &Path, cache_dir: Option<PathBuf>) -> Result<()> {
    let Some(cache) = cache_dir.or_else(harness::cache_dir) else {
        bail!("no cache directory: pass --cache-dir or set {}", harness::CACHE_ENV);
    };
    let clips = load_corpus_dir(corpus, &MfccConfig::default(), Some(&cache))?;
    eprintln!("cached features of {} clips in {}", clips.len(), cache.display());
    Ok(())
}

fn report(paths: &[PathBuf], k: usize, out: Option<&Path>) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| ExperimentReport::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let (text, csv) = if let [one] = reports.as_slice() { emit_tables(one)? } else { emit_language_table(&reports, k)? };
    print!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("tables.csv"), csv)?;
        std::fs::write(dir.join("tables.txt"), text)?;
    }
    Ok(())
}
