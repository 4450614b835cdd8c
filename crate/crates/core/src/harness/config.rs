//! Experiment configuration.
//!
//! The file format is flat TOML: one `key = value` per line, values are
//! strings, integers, floats, booleans, or arrays of those. There are no
//! tables. Unknown keys are errors. `corpus` and `target_language` are
//! required; everything else falls back to the selected profile.
//!
//! ```toml
//! corpus = "synthetic"          # or a directory <language>/<emotion>/*.wav
//! target_language = "english"
//! profile = "smoke"             # smoke | paper (default paper)
//! k_shots = [5, 10, 20]
//! variants = ["supervised", "maml", "fmaml"]
//! alpha = 0.1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodes::{EpisodeSpec, InputShape};
use crate::error::{Error, Result};
use crate::meta::{GradMode, TrainConfig, Variant};
use crate::model::ModelConfig;

/// Corpus value that selects the built-in synthetic stand-in.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Desk-scale model and schedule for the synthetic benchmark.
    Smoke,
    /// The full-size model and published hyperparameters.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Profile::Smoke),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected smoke or paper)"))),
        }
    }
}

/// A learner in the comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    Maml,
    Fmaml,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::Maml => "maml",
            Method::Fmaml => "fmaml",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Supervised => None,
            Method::Maml => Some(Variant::Maml),
            Method::Fmaml => Some(Variant::Fmaml),
        }
    }
}

/// Keys as written in the file; `None` means "use the profile default".
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    corpus: String,
    target_language: String,
    profile: Option<Profile>,
    seed: Option<u64>,
    corpus_seed: Option<u64>,
    output_dir: Option<PathBuf>,
    source_languages: Option<Vec<String>>,
    k_shots: Option<Vec<usize>>,
    meta_train_k: Option<usize>,
    variants: Option<Vec<Method>>,
    trials: Option<usize>,
    eval_per_label: Option<usize>,
    fixed_pool_per_class: Option<usize>,
    parallel_cells: Option<bool>,
    // training
    alpha: Option<f64>,
    beta: Option<f64>,
    meta_batch: Option<usize>,
    inner_steps: Option<usize>,
    meta_iters: Option<usize>,
    finetune_iters: Option<usize>,
    grad_mode: Option<GradMode>,
    freeze_fixed: Option<bool>,
    baseline_epochs: Option<usize>,
    second_order_cap: Option<usize>,
    // episodes
    n_new: Option<usize>,
    n_fixed: Option<usize>,
    q_new: Option<usize>,
    q_fixed: Option<usize>,
    // model and input
    t_fixed: Option<usize>,
    in_h: Option<usize>,
    in_w: Option<usize>,
    blocks: Option<usize>,
    filters: Option<usize>,
    pool_h: Option<usize>,
    pool_w: Option<usize>,
}

/// Command-line settings that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub profile: Option<Profile>,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: String,
    pub target_language: String,
    pub profile: Profile,
    pub seed: u64,
    /// Seed of the synthetic corpus; kept apart from `seed` so several
    /// training seeds can share one corpus.
    pub corpus_seed: u64,
    #[serde(skip)]
    pub output_dir: PathBuf,
    /// Meta-training languages; `None` means every corpus language except
    /// the target. The target is always removed.
    pub source_languages: Option<Vec<String>>,
    pub k_shots: Vec<usize>,
    /// Shot count of the meta-training episodes; fine-tuning uses each of
    /// `k_shots` from the same meta-trained initialisation.
    pub meta_train_k: usize,
    pub variants: Vec<Method>,
    pub trials: usize,
    pub eval_per_label: usize,
    pub fixed_pool_per_class: usize,
    pub parallel_cells: bool,
    pub train: TrainConfig,
    pub episodes: EpisodeSpec,
    pub input: InputShape,
    pub model: ModelConfig,
}

struct ProfileDefaults {
    beta: f64,
    meta_batch: usize,
    inner_steps: usize,
    meta_iters: usize,
    trials: usize,
    model: ModelConfig,
}

fn profile_defaults(profile: Profile, ways: usize) -> ProfileDefaults {
    match profile {
        Profile::Paper => ProfileDefaults {
            beta: 0.001,
            meta_batch: 16,
            inner_steps: 5,
            meta_iters: 2000,
            trials: 100,
            model: ModelConfig::paper(ways),
        },
        Profile::Smoke => ProfileDefaults {
            beta: 0.05,
            meta_batch: 4,
            inner_steps: 3,
            meta_iters: 300,
            trials: 20,
            model: ModelConfig { in_h: 20, in_w: 60, filters: 8, pool_h: 1, pool_w: 3, ..ModelConfig::paper(ways) },
        },
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &Overrides) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::resolve(raw, overrides)
    }

    /// Built-in defaults for `corpus` and `target_language`.
    pub fn defaults(corpus: &str, target_language: &str, overrides: &Overrides) -> Result<Self> {
        Self::resolve(
            RawConfig { corpus: corpus.into(), target_language: target_language.into(), ..RawConfig::default() },
            overrides,
        )
    }

    fn resolve(raw: RawConfig, ov: &Overrides) -> Result<Self> {
        let profile = ov.profile.or(raw.profile).unwrap_or(Profile::Paper);
        let base = EpisodeSpec::default();
        let k_shots = raw.k_shots.unwrap_or_else(|| vec![5, 10, 20]);
        let episodes = EpisodeSpec {
            n_new: raw.n_new.unwrap_or(base.n_new),
            n_fixed: raw.n_fixed.unwrap_or(base.n_fixed),
            k_shot: raw.meta_train_k.or_else(|| k_shots.iter().copied().min()).unwrap_or(base.k_shot),
            q_new: raw.q_new.unwrap_or(base.q_new),
            q_fixed: raw.q_fixed.unwrap_or(base.q_fixed),
        };
        let d = profile_defaults(profile, episodes.ways());
        let t = TrainConfig::default();
        let train = TrainConfig {
            alpha: raw.alpha.unwrap_or(t.alpha),
            beta: raw.beta.unwrap_or(d.beta),
            meta_batch: raw.meta_batch.unwrap_or(d.meta_batch),
            inner_steps: raw.inner_steps.unwrap_or(d.inner_steps),
            meta_iters: raw.meta_iters.unwrap_or(d.meta_iters),
            finetune_iters: raw.finetune_iters.or(t.finetune_iters),
            grad_mode: raw.grad_mode.unwrap_or(t.grad_mode),
            variant: t.variant,
            seed: ov.seed.or(raw.seed).unwrap_or(t.seed),
            freeze_fixed: raw.freeze_fixed.unwrap_or(t.freeze_fixed),
            baseline_epochs: raw.baseline_epochs.unwrap_or(t.baseline_epochs),
            second_order_cap: raw.second_order_cap.unwrap_or(t.second_order_cap),
        };
        let model = ModelConfig {
            in_h: raw.in_h.unwrap_or(d.model.in_h),
            in_w: raw.in_w.unwrap_or(d.model.in_w),
            blocks: raw.blocks.unwrap_or(d.model.blocks),
            filters: raw.filters.unwrap_or(d.model.filters),
            pool_h: raw.pool_h.unwrap_or(d.model.pool_h),
            pool_w: raw.pool_w.unwrap_or(d.model.pool_w),
            ..d.model
        };
        let input = InputShape { t_fixed: raw.t_fixed.unwrap_or(300), height: model.in_h, width: model.in_w };
        let cfg = ExperimentConfig {
            corpus: raw.corpus,
            target_language: raw.target_language,
            profile,
            seed: train.seed,
            corpus_seed: raw.corpus_seed.unwrap_or(0),
            output_dir: ov.output_dir.clone().or(raw.output_dir).unwrap_or_else(|| PathBuf::from("fmaml-out")),
            source_languages: raw.source_languages,
            meta_train_k: episodes.k_shot,
            k_shots,
            variants: raw.variants.unwrap_or_else(|| vec![Method::Supervised, Method::Maml, Method::Fmaml]),
            trials: raw.trials.unwrap_or(d.trials),
            eval_per_label: raw.eval_per_label.unwrap_or(25),
            fixed_pool_per_class: raw.fixed_pool_per_class.unwrap_or(100),
            parallel_cells: raw.parallel_cells.unwrap_or(false),
            train,
            episodes,
            input,
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpus.is_empty() || self.target_language.is_empty() {
            return bad("corpus and target_language must be non-empty".into());
        }
        if self.k_shots.is_empty() || self.k_shots.contains(&0) {
            return bad("k_shots must be a non-empty list of positive counts".into());
        }
        if self.variants.is_empty() {
            return bad("variants must name at least one of supervised, maml, fmaml".into());
        }
        if self.trials == 0 || self.eval_per_label == 0 {
            return bad("trials and eval_per_label must be at least 1".into());
        }
        if self.variants.contains(&Method::Fmaml) && self.episodes.n_fixed == 0 {
            return bad("fmaml needs n_fixed ≥ 1".into());
        }
        let e = &self.episodes;
        let need = (self.k_shots.iter().max().copied().unwrap_or(0) + self.eval_per_label).max(e.k_shot + e.q_new.max(e.q_fixed));
        if e.n_fixed > 0 && self.fixed_pool_per_class < need {
            return bad(format!("fixed_pool_per_class must be at least {need}"));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.episodes.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn is_synthetic(&self) -> bool {
        self.corpus == SYNTHETIC
    }

    /// SHA-256 of the canonical JSON form; `output_dir` is not part of it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Training configuration for one meta-learning variant.
    pub fn train_for(&self, variant: Variant) -> TrainConfig {
        TrainConfig { variant, ..self.train.clone() }
    }

    /// Episode spec with the given shot count.
    pub fn spec_for(&self, k: usize) -> EpisodeSpec {
        EpisodeSpec { k_shot: k, ..self.episodes.clone() }
    }
}

pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml_str(&text, overrides)
}
