//! Meta-task and target-task construction.
//!
//! New classes get a fresh random permutation of slots `0..N` in every task;
//! the fixed classes always sit at `N, N+1, …` in [`FIXED_LABELS`] order.
//! Fixed-class clips come from a language-neutral shared pool and, in pinned
//! mode, appear only in query sets.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{fit_to, pad_or_crop, FeatureClip, FIXED_LABELS, SHARED_LANGUAGE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How MFCC matrices become fixed-size model inputs: pad-or-crop to
/// `t_fixed` frames, then average-pool to `height × width`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub t_fixed: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn prepare(&self, clip: &FeatureClip) -> Result<Tensor> {
        fit_to(&pad_or_crop(&clip.mfcc, self.t_fixed)?, self.height, self.width)
    }
}

/// A registered clip with its prepared `[height × width]` input.
#[derive(Debug)]
pub struct Sample {
    pub clip: FeatureClip,
    pub input: Tensor,
}

/// Clips indexed by `(language, label)`. Fixed-class clips live under
/// [`SHARED_LANGUAGE`].
///
/// Every sampling call records the languages it drew from; the harness
/// uses this log to prove the target language stays unseen during
/// meta-training.
#[derive(Debug)]
pub struct DatasetRegistry {
    samples: Vec<Arc<Sample>>,
    index: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    shape: InputShape,
    audit: Mutex<BTreeSet<String>>,
}

pub fn register_corpus(clips: Vec<FeatureClip>, shape: &InputShape) -> Result<DatasetRegistry> {
    DatasetRegistry::new(clips, shape)
}

impl DatasetRegistry {
    pub fn new(clips: Vec<FeatureClip>, shape: &InputShape) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Corpus("cannot register an empty corpus".into()));
        }
        let mut seen = HashSet::new();
        let mut index: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        let mut samples = Vec::with_capacity(clips.len());
        for clip in clips {
            if clip.language.is_empty() || clip.emotion.is_empty() {
                return Err(Error::Corpus(format!("clip {} lacks a language or label", clip.source_id)));
            }
            if !seen.insert(clip.source_id.clone()) {
                return Err(Error::Corpus(format!("duplicate source_id {}", clip.source_id)));
            }
            let language = if clip.is_fixed() { SHARED_LANGUAGE.to_string() } else { clip.language.clone() };
            index.entry(language).or_default().entry(clip.emotion.clone()).or_default().push(samples.len());
            let input = shape.prepare(&clip)?;
            samples.push(Arc::new(Sample { clip, input }));
        }
        Ok(DatasetRegistry { samples, index, shape: shape.clone(), audit: Mutex::new(BTreeSet::new()) })
    }

    pub fn input_shape(&self) -> &InputShape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Languages with emotion clips (the shared pool excluded), sorted.
    pub fn languages(&self) -> Vec<String> {
        self.index.keys().filter(|l| *l != SHARED_LANGUAGE).cloned().collect()
    }

    /// Labels present for `language`, sorted.
    pub fn labels(&self, language: &str) -> Vec<String> {
        self.index.get(language).map(|m| m.keys().cloned().collect()).unwrap_or_default()
    }

    pub fn count(&self, language: &str, label: &str) -> usize {
        self.index.get(language).and_then(|m| m.get(label)).map_or(0, Vec::len)
    }

    pub fn language_total(&self, language: &str) -> usize {
        self.index.get(language).map_or(0, |m| m.values().map(Vec::len).sum())
    }

    /// Order-independent digest of every registered source id and input.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.clip.source_id.as_bytes());
            h.update([0u8]);
            h.update(s.clip.language.as_bytes());
            h.update([0u8]);
            h.update(s.clip.emotion.as_bytes());
            for v in s.input.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Languages read by sampling calls since the last [`Self::take_audit`].
    pub fn take_audit(&self) -> BTreeSet<String> {
        std::mem::take(&mut *self.audit.lock().expect("audit lock"))
    }

    fn touch(&self, language: &str) {
        self.audit.lock().expect("audit lock").insert(language.to_string());
    }

    fn pool(&self, language: &str, label: &str) -> &[usize] {
        self.index.get(language).and_then(|m| m.get(label)).map_or(&[], Vec::as_slice)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, language: &str, label: &str, n: usize) -> Result<Vec<Arc<Sample>>> {
        let pool = self.pool(language, label);
        if pool.len() < n {
            return Err(Error::InsufficientClips(format!(
                "{language}/{label}: need {n}, have {}",
                pool.len()
            )));
        }
        self.touch(language);
        Ok(index::sample(rng, pool.len(), n).iter().map(|i| self.samples[pool[i]].clone()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_new: usize,
    pub n_fixed: usize,
    pub k_shot: usize,
    pub q_new: usize,
    pub q_fixed: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec { n_new: 5, n_fixed: 2, k_shot: 5, q_new: 5, q_fixed: 5 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_new == 0 || self.k_shot == 0 || self.q_new == 0 {
            return Err(Error::invalid("n_new, k_shot and q_new must be at least 1"));
        }
        if self.n_fixed == 0 && self.n_new < 2 {
            return Err(Error::invalid("a task without fixed classes needs n_new ≥ 2"));
        }
        if self.n_fixed > FIXED_LABELS.len() {
            return Err(Error::invalid(format!("at most {} fixed classes exist", FIXED_LABELS.len())));
        }
        if self.n_fixed > 0 && self.q_fixed == 0 {
            return Err(Error::invalid("q_fixed must be at least 1 when fixed classes are used"));
        }
        Ok(())
    }

    /// Output slots: `N + F`.
    pub fn ways(&self) -> usize {
        self.n_new + self.n_fixed
    }

    pub fn fixed_labels(&self) -> &'static [&'static str] {
        &FIXED_LABELS[..self.n_fixed]
    }
}

/// Whether fixed classes keep their reserved tail slots and stay out of
/// support sets (`Pinned`), or are handled like any other class (`Ordinary`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixedMode {
    Pinned,
    Ordinary,
}

/// Label of every output slot, indexed by slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotMap {
    labels: Vec<String>,
}

impl SlotMap {
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        let unique: HashSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() || labels.is_empty() {
            return Err(Error::invalid("slot labels must be non-empty and distinct"));
        }
        Ok(SlotMap { labels })
    }

    /// `new` get a random permutation of `0..N`; in pinned mode `fixed` take
    /// `N..N+F` in order, otherwise all `N+F` labels are permuted together.
    fn random<R: Rng + ?Sized>(rng: &mut R, new: &[String], fixed: &[&str], mode: FixedMode) -> Self {
        let mut labels = new.to_vec();
        if mode == FixedMode::Ordinary {
            labels.extend(fixed.iter().map(|s| s.to_string()));
        }
        labels.shuffle(rng);
        if mode == FixedMode::Pinned {
            labels.extend(fixed.iter().map(|s| s.to_string()));
        }
        SlotMap { labels }
    }

    pub fn slot(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, slot: usize) -> Option<&str> {
        self.labels.get(slot).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeItem {
    pub sample: Arc<Sample>,
    pub slot: usize,
}

impl EpisodeItem {
    pub fn clip(&self) -> &FeatureClip {
        &self.sample.clip
    }

    pub fn input(&self) -> &Tensor {
        &self.sample.input
    }
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub id: u64,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    pub slot_map: SlotMap,
    pub language: String,
}

/// A held-out-language task: fine-tuning support and evaluation query.
#[derive(Clone, Debug)]
pub struct TargetTask {
    pub support: Vec<EpisodeItem>,
    pub eval_query: Vec<EpisodeItem>,
    pub slot_map: SlotMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Support,
    Query,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_id: String,
    pub role: Role,
    pub slot: usize,
    pub episode_id: u64,
}

impl Episode {
    pub fn manifest(&self) -> Vec<ManifestRecord> {
        let rec = |role: Role| {
            move |it: &EpisodeItem| ManifestRecord {
                source_id: it.clip().source_id.clone(),
                role: role.clone(),
                slot: it.slot,
                episode_id: self.id,
            }
        };
        self.support.iter().map(rec(Role::Support)).chain(self.query.iter().map(rec(Role::Query))).collect()
    }
}

/// Writes one JSON record per line for every support and query item.
pub fn write_manifest(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ep in episodes {
        for r in ep.manifest() {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn items(samples: Vec<Arc<Sample>>, slot: usize) -> impl Iterator<Item = EpisodeItem> {
    samples.into_iter().map(move |sample| EpisodeItem { sample, slot })
}

/// Emotions of `language` with at least `need` clips, sorted.
fn eligible(reg: &DatasetRegistry, language: &str, need: usize) -> Vec<String> {
    reg.labels(language)
        .into_iter()
        .filter(|l| !FIXED_LABELS.contains(&l.as_str()) && reg.count(language, l) >= need)
        .collect()
}

fn choose_labels<R: Rng + ?Sized>(rng: &mut R, pool: &[String], n: usize) -> Vec<String> {
    if pool.len() == n {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

/// One meta-learning task with fixed classes pinned (query only).
pub fn sample_meta_task<R: Rng + ?Sized>(reg: &DatasetRegistry, spec: &EpisodeSpec, languages: &[String], rng: &mut R) -> Result<Episode> {
    sample_task(reg, spec, languages, FixedMode::Pinned, rng)
}

/// One meta-learning task in either fixed-class mode. In `Ordinary` mode the
/// fixed classes contribute `k_shot` support and `q_new` query clips each and
/// share the random slot permutation.
pub fn sample_task<R: Rng + ?Sized>(
    reg: &DatasetRegistry,
    spec: &EpisodeSpec,
    languages: &[String],
    mode: FixedMode,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let need = spec.k_shot + spec.q_new;
    let mut candidates: Vec<&String> = languages
        .iter()
        .filter(|l| l.as_str() != SHARED_LANGUAGE && eligible(reg, l, need).len() >= spec.n_new)
        .collect();
    candidates.sort();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::InsufficientClips(format!(
            "no language in {languages:?} has {} emotions with ≥ {need} clips",
            spec.n_new
        )));
    }
    let language = candidates[rng.random_range(0..candidates.len())].clone();
    let emotions = choose_labels(rng, &eligible(reg, &language, need), spec.n_new);
    let fixed = spec.fixed_labels();
    let slot_map = SlotMap::random(rng, &emotions, fixed, mode);
    let (mut support, mut query) = (Vec::new(), Vec::new());
    let mut split = |lang: &str, label: &str, k: usize, q: usize, rng: &mut R| -> Result<()> {
        let slot = slot_map.slot(label).expect("label has a slot");
        let mut drawn = reg.draw(rng, lang, label, k + q)?;
        let rest = drawn.split_off(k);
        support.extend(items(drawn, slot));
        query.extend(items(rest, slot));
        Ok(())
    };
    for e in &emotions {
        split(&language, e, spec.k_shot, spec.q_new, rng)?;
    }
    for f in fixed {
        match mode {
            FixedMode::Pinned => split(SHARED_LANGUAGE, f, 0, spec.q_fixed, rng)?,
            FixedMode::Ordinary => split(SHARED_LANGUAGE, f, spec.k_shot, spec.q_new, rng)?,
        }
    }
    Ok(Episode { id: 0, support, query, slot_map, language })
}

/// Fine-tuning support (`k_shot` per new emotion, no fixed classes) and an
/// evaluation query with `eval_per_label` clips of every label, fixed
/// classes included.
pub fn build_target_task<R: Rng + ?Sized>(
    reg: &DatasetRegistry,
    spec: &EpisodeSpec,
    target_language: &str,
    eval_per_label: usize,
    rng: &mut R,
) -> Result<TargetTask> {
    build_target_task_with(reg, spec, target_language, eval_per_label, FixedMode::Pinned, rng)
}

/// [`build_target_task`] in either mode; `Ordinary` also puts `k_shot`
/// fixed-class clips in the support set.
pub fn build_target_task_with<R: Rng + ?Sized>(
    reg: &DatasetRegistry,
    spec: &EpisodeSpec,
    target_language: &str,
    eval_per_label: usize,
    mode: FixedMode,
    rng: &mut R,
) -> Result<TargetTask> {
    spec.validate()?;
    if eval_per_label == 0 {
        return Err(Error::invalid("eval_per_label must be at least 1"));
    }
    let need = spec.k_shot + eval_per_label;
    let pool = eligible(reg, target_language, need);
    if pool.len() < spec.n_new {
        let short: Vec<String> = reg
            .labels(target_language)
            .into_iter()
            .filter(|l| reg.count(target_language, l) < need)
            .map(|l| format!("{l} ({})", reg.count(target_language, &l)))
            .collect();
        return Err(Error::InsufficientClips(format!(
            "{target_language}: need {} emotions with ≥ {need} clips (K={} + eval {eval_per_label}); short: {}",
            spec.n_new,
            spec.k_shot,
            short.join(", ")
        )));
    }
    let emotions = choose_labels(rng, &pool, spec.n_new);
    let fixed = spec.fixed_labels();
    let slot_map = SlotMap::random(rng, &emotions, fixed, mode);
    let (mut support, mut eval_query) = (Vec::new(), Vec::new());
    for e in &emotions {
        let slot = slot_map.slot(e).expect("emotion has a slot");
        let mut drawn = reg.draw(rng, target_language, e, need)?;
        let rest = drawn.split_off(spec.k_shot);
        support.extend(items(drawn, slot));
        eval_query.extend(items(rest, slot));
    }
    for f in fixed {
        let slot = slot_map.slot(f).expect("fixed label has a slot");
        let k = if mode == FixedMode::Ordinary { spec.k_shot } else { 0 };
        let mut drawn = reg.draw(rng, SHARED_LANGUAGE, f, k + eval_per_label)?;
        let rest = drawn.split_off(k);
        support.extend(items(drawn, slot));
        eval_query.extend(items(rest, slot));
    }
    Ok(TargetTask { support, eval_query, slot_map })
}
