//! Meta-learning stage, fine-tuning, the supervised baseline, and evaluation.
//!
//! The inner loop takes full-batch SGD steps on the support loss from `θ`,
//! giving `θ′`; the outer loop averages the query-loss gradients over a batch
//! of tasks and takes one SGD step with rate β. Batch norm uses batch
//! statistics inside both loops; running statistics are folded in from query
//! batches and used only by [`evaluate`].

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{
    build_target_task_with, sample_task, DatasetRegistry, Episode, EpisodeItem, EpisodeSpec, FixedMode,
};
use crate::error::{Error, Result};
use crate::model::{batch_input, forward, BnMode, BnStats, Model, ModelConfig, HEAD_BIAS, HEAD_WEIGHT};
use crate::rng;
use crate::tensor::{argmax, backward, cross_entropy, sgd_step, GradMap, Graph, ParamSet, Tensor, Var};

pub const DEFAULT_SECOND_ORDER_CAP: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    FirstOrder,
    SecondOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Maml,
    Fmaml,
}

impl Variant {
    /// `fmaml` pins the fixed classes; `maml` treats them as ordinary classes.
    pub fn fixed_mode(self) -> FixedMode {
        match self {
            Variant::Fmaml => FixedMode::Pinned,
            Variant::Maml => FixedMode::Ordinary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub meta_batch: usize,
    pub inner_steps: usize,
    pub meta_iters: usize,
    /// Defaults to `inner_steps` when unset.
    pub finetune_iters: Option<usize>,
    pub grad_mode: GradMode,
    pub variant: Variant,
    pub seed: u64,
    /// For `fmaml`: hold the fixed-slot head rows still during adaptation.
    pub freeze_fixed: bool,
    pub baseline_epochs: usize,
    pub second_order_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 0.001,
            meta_batch: 16,
            inner_steps: 5,
            meta_iters: 2000,
            finetune_iters: None,
            grad_mode: GradMode::FirstOrder,
            variant: Variant::Fmaml,
            seed: 0,
            freeze_fixed: true,
            baseline_epochs: 100,
            second_order_cap: DEFAULT_SECOND_ORDER_CAP,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("alpha and beta must be positive and finite"));
        }
        if self.meta_batch == 0 {
            return Err(Error::invalid("meta_batch must be at least 1"));
        }
        Ok(())
    }

    pub fn finetune_steps(&self) -> usize {
        self.finetune_iters.unwrap_or(self.inner_steps)
    }

    /// Number of leading (trainable) head rows when freezing applies.
    fn frozen_from(&self, spec: &EpisodeSpec) -> Option<usize> {
        (self.variant == Variant::Fmaml && self.freeze_fixed && spec.n_fixed > 0).then_some(spec.n_new)
    }
}

/// Input batch `[B×1×H×W]` and one-hot labels `[B×C]` for a list of items.
pub fn batch(items: &[EpisodeItem], n_classes: usize) -> Result<(Tensor, Tensor)> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inputs: Vec<&Tensor> = items.iter().map(EpisodeItem::input).collect();
    let slots: Vec<usize> = items.iter().map(|i| i.slot).collect();
    Ok((batch_input(&inputs)?, Tensor::one_hot(&slots, n_classes)?))
}

struct TaskLoss {
    loss: Var,
    logits: Var,
    stats: BnStats,
}

fn task_loss(g: &mut Graph, cfg: &ModelConfig, bound: &crate::tensor::BoundParams, data: &(Tensor, Tensor)) -> Result<TaskLoss> {
    let x = g.constant(data.0.clone());
    let out = forward(g, cfg, bound, x, BnMode::Batch)?;
    let loss = cross_entropy(g, out.logits, &data.1)?;
    Ok(TaskLoss { loss, logits: out.logits, stats: out.batch_stats.expect("batch mode yields statistics") })
}

fn accuracy_of(logits: &Tensor, items: &[EpisodeItem]) -> f64 {
    let c = logits.shape()[1];
    let hits = logits.data().chunks(c).zip(items).filter(|(row, it)| argmax(row) == it.slot).count();
    hits as f64 / items.len() as f64
}

/// Zeroes head rows/entries at slots `≥ from`.
fn mask_head(grads: &GradMap, from: usize) -> Result<GradMap> {
    let mut out = grads.clone();
    for name in [HEAD_WEIGHT, HEAD_BIAS] {
        let t = grads.get(name).ok_or_else(|| Error::invalid(format!("missing `{name}`")))?;
        let m = head_mask(t.shape(), from)?;
        out.replace(name, Tensor::new(t.shape().to_vec(), t.data().iter().zip(m.data()).map(|(a, b)| a * b).collect())?)?;
    }
    Ok(out)
}

fn head_mask(shape: &[usize], from: usize) -> Result<Tensor> {
    let per_row: usize = shape[1..].iter().product();
    Tensor::from_fn(shape, |i| if i / per_row < from { 1.0 } else { 0.0 })
}

fn loss_value(g: &Graph, loss: Var, iteration: usize) -> Result<f64> {
    let v = g.value(loss)?.item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { iteration })
    }
}

fn nonfinite_at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { iteration },
        other => other,
    }
}

/// `steps` full-batch SGD steps on the support loss. `frozen_from` keeps head
/// rows at slots `≥` it unchanged.
pub fn inner_adapt_masked(
    cfg: &ModelConfig,
    theta: &ParamSet,
    support: &[EpisodeItem],
    alpha: f64,
    steps: usize,
    frozen_from: Option<usize>,
) -> Result<ParamSet> {
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    if steps == 0 || alpha == 0.0 {
        return Ok(theta.clone());
    }
    let data = batch(support, cfg.n_classes)?;
    let mut p = theta.clone();
    for s in 0..steps {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let tl = task_loss(&mut g, cfg, &bound, &data).map_err(nonfinite_at(s))?;
        loss_value(&g, tl.loss, s)?;
        let mut grads = backward(&mut g, tl.loss, &bound).map_err(nonfinite_at(s))?;
        if let Some(from) = frozen_from {
            grads = mask_head(&grads, from)?;
        }
        p = sgd_step(&p, &grads, alpha).map_err(nonfinite_at(s))?;
    }
    Ok(p)
}

/// `θ′` after `steps` full-batch gradient steps on the support loss.
pub fn inner_adapt(cfg: &ModelConfig, theta: &ParamSet, support: &[EpisodeItem], alpha: f64, steps: usize) -> Result<ParamSet> {
    inner_adapt_masked(cfg, theta, support, alpha, steps, None)
}

/// Query-side results of one task.
#[derive(Clone, Debug)]
pub struct MetaGrad {
    pub grads: GradMap,
    pub query_loss: f64,
    pub query_acc: f64,
    /// Batch statistics of the query pass at `θ′`.
    pub query_stats: BnStats,
}

/// Gradient of the post-adaptation query loss with respect to `θ`.
///
/// `FirstOrder` differentiates at `θ′` and treats `θ′` as if it were `θ`;
/// `SecondOrder` differentiates through the recorded inner updates. With
/// `α = 0` or `steps = 0` both take the same path, so they agree exactly.
#[allow(clippy::too_many_arguments)]
pub fn meta_gradient(
    cfg: &ModelConfig,
    theta: &ParamSet,
    support: &[EpisodeItem],
    query: &[EpisodeItem],
    alpha: f64,
    steps: usize,
    mode: GradMode,
    frozen_from: Option<usize>,
    cap: usize,
) -> Result<MetaGrad> {
    if mode == GradMode::SecondOrder && theta.numel() > cap {
        return Err(Error::SecondOrderCap { params: theta.numel(), cap });
    }
    let qdata = batch(query, cfg.n_classes)?;
    if mode == GradMode::FirstOrder || steps == 0 || alpha == 0.0 {
        let adapted = inner_adapt_masked(cfg, theta, support, alpha, steps, frozen_from)?;
        let mut g = Graph::new();
        let bound = adapted.bind(&mut g);
        let tl = task_loss(&mut g, cfg, &bound, &qdata).map_err(nonfinite_at(steps))?;
        let query_loss = loss_value(&g, tl.loss, steps)?;
        let query_acc = accuracy_of(g.value(tl.logits)?, query);
        let grads = backward(&mut g, tl.loss, &bound)?;
        return Ok(MetaGrad { grads, query_loss, query_acc, query_stats: tl.stats });
    }
    let sdata = batch(support, cfg.n_classes)?;
    let mut g = Graph::new();
    let bound = theta.bind(&mut g);
    let names = bound.names().to_vec();
    let masks: Vec<Option<Var>> = match frozen_from {
        None => vec![None; names.len()],
        Some(from) => names
            .iter()
            .map(|n| {
                if n == HEAD_WEIGHT || n == HEAD_BIAS {
                    let shape = theta.get(n).expect("bound name").shape().to_vec();
                    Ok(Some(g.constant(head_mask(&shape, from)?)))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?,
    };
    let mut current = bound.clone();
    for s in 0..steps {
        let tl = task_loss(&mut g, cfg, &current, &sdata).map_err(nonfinite_at(s))?;
        loss_value(&g, tl.loss, s)?;
        let grads = g.grad(tl.loss, current.vars(), true).map_err(nonfinite_at(s))?;
        let mut next = Vec::with_capacity(grads.len());
        for ((&v, gr), mask) in current.vars().iter().zip(grads).zip(&masks) {
            let gr = match mask {
                Some(m) => g.mul(gr, *m)?,
                None => gr,
            };
            let step = g.scale(gr, alpha)?;
            next.push(g.sub(v, step).map_err(nonfinite_at(s))?);
        }
        current = crate::tensor::BoundParams::from_parts(names.clone(), next);
    }
    let tl = task_loss(&mut g, cfg, &current, &qdata).map_err(nonfinite_at(steps))?;
    let query_loss = loss_value(&g, tl.loss, steps)?;
    let query_acc = accuracy_of(g.value(tl.logits)?, query);
    let grads = backward(&mut g, tl.loss, &bound)?;
    Ok(MetaGrad { grads, query_loss, query_acc, query_stats: tl.stats })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub meta_loss: f64,
    pub query_acc: f64,
}

/// One outer update over `tasks`: per-task meta-gradients (in parallel),
/// summed in `episode.id` order, scaled by `1/|tasks|`, then
/// `θ ← θ − β·mean`. Running BN statistics absorb the mean query statistics.
pub fn meta_step(model: &Model, tasks: &[Episode], cfg: &TrainConfig, spec: &EpisodeSpec) -> Result<(Model, StepStats)> {
    if tasks.is_empty() {
        return Err(Error::invalid("meta_step needs at least one task"));
    }
    let frozen = cfg.frozen_from(spec);
    let mut results: Vec<(u64, MetaGrad)> = tasks
        .par_iter()
        .map(|ep| {
            meta_gradient(
                &model.config,
                &model.params,
                &ep.support,
                &ep.query,
                cfg.alpha,
                cfg.inner_steps,
                cfg.grad_mode,
                frozen,
                cfg.second_order_cap,
            )
            .map(|m| (ep.id, m))
        })
        .collect::<Result<_>>()?;
    results.sort_by_key(|(id, _)| *id);
    let mut sum = results[0].1.grads.clone();
    for (_, m) in &results[1..] {
        sum = sum.axpy(1.0, &m.grads)?;
    }
    let n = results.len() as f64;
    let mean = sum.scaled(1.0 / n)?;
    let params = sgd_step(&model.params, &mean, cfg.beta)?;
    let stats: Vec<BnStats> = results.iter().map(|(_, m)| m.query_stats.clone()).collect();
    let mut bn = model.bn.clone();
    bn.absorb(&BnStats::average(&stats).expect("non-empty"), model.config.bn_momentum);
    let meta_loss = results.iter().map(|(_, m)| m.query_loss).sum::<f64>() / n;
    let query_acc = results.iter().map(|(_, m)| m.query_acc).sum::<f64>() / n;
    Ok((Model { config: model.config.clone(), params, bn }, StepStats { meta_loss, query_acc }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub meta_loss: f64,
    pub query_acc: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.meta_loss).collect()
    }
}

fn check_model_fits(model_cfg: &ModelConfig, spec: &EpisodeSpec) -> Result<()> {
    spec.validate()?;
    if model_cfg.n_classes != spec.ways() {
        return Err(Error::invalid(format!(
            "model has {} output slots but tasks are {}-way",
            model_cfg.n_classes,
            spec.ways()
        )));
    }
    Ok(())
}

/// Samples the tasks of meta-iteration `iter` (ids `iter·B .. iter·B + B`).
pub fn sample_meta_batch(
    reg: &DatasetRegistry,
    spec: &EpisodeSpec,
    sources: &[String],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<Vec<Episode>> {
    let mut r = rng::stream(cfg.seed, "meta-iter", iter as u64);
    (0..cfg.meta_batch)
        .map(|b| {
            let mut ep = sample_task(reg, spec, sources, cfg.variant.fixed_mode(), &mut r)?;
            ep.id = (iter * cfg.meta_batch + b) as u64;
            Ok(ep)
        })
        .collect()
}

/// Meta-trains from the seed's random initialisation. `fmaml` requires fixed
/// classes in the spec.
pub fn meta_train(
    reg: &DatasetRegistry,
    spec: &EpisodeSpec,
    sources: &[String],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model, TrainTrace)> {
    meta_train_with(reg, spec, sources, model_cfg, cfg, |_, _| {})
}

/// [`meta_train`] with a per-iteration callback `(iter, stats)`.
pub fn meta_train_with(
    reg: &DatasetRegistry,
    spec: &EpisodeSpec,
    sources: &[String],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(usize, &StepStats),
) -> Result<(Model, TrainTrace)> {
    cfg.validate()?;
    check_model_fits(model_cfg, spec)?;
    if cfg.variant == Variant::Fmaml && spec.n_fixed == 0 {
        return Err(Error::invalid("fmaml needs at least one fixed class"));
    }
    let mut model = Model::init(model_cfg.clone(), cfg.seed)?;
    let mut trace = TrainTrace::default();
    for it in 0..cfg.meta_iters {
        let start = Instant::now();
        let tasks = sample_meta_batch(reg, spec, sources, cfg, it)?;
        let (next, stats) = meta_step(&model, &tasks, cfg, spec).map_err(|e| match e {
            Error::NonFiniteLoss { .. } | Error::NonFinite(_) => Error::NonFiniteLoss { iteration: it },
            other => other,
        })?;
        model = next;
        on_iter(it, &stats);
        trace.rows.push(TraceRow {
            iter: it,
            meta_loss: stats.meta_loss,
            query_acc: stats.query_acc,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((model, trace))
}

/// Adapts a meta-learned model to a target support set with `finetune_iters`
/// steps at rate α. Under `fmaml` with `freeze_fixed`, the fixed-slot head
/// rows are held still. Running BN statistics are kept from `model`.
pub fn fine_tune(model: &Model, support: &[EpisodeItem], spec: &EpisodeSpec, cfg: &TrainConfig) -> Result<Model> {
    let p = inner_adapt_masked(&model.config, &model.params, support, cfg.alpha, cfg.finetune_steps(), cfg.frozen_from(spec))?;
    Ok(model.with_params(p))
}

/// Fraction of items whose argmax slot (lowest index on ties) is their own,
/// using running BN statistics.
pub fn evaluate(model: &Model, items: &[EpisodeItem]) -> Result<f64> {
    evaluate_with(model, items, BnMode::Running(&model.bn))
}

pub fn evaluate_with(model: &Model, items: &[EpisodeItem], mode: BnMode<'_>) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut hits = 0usize;
    for chunk in items.chunks(64) {
        let (x, _) = batch(chunk, model.config.n_classes)?;
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let xv = g.constant(x);
        let out = forward(&mut g, &model.config, &bound, xv, mode)?;
        let logits = g.value(out.logits)?;
        hits += (accuracy_of(logits, chunk) * chunk.len() as f64).round() as usize;
    }
    Ok(hits as f64 / items.len() as f64)
}

/// Trains a freshly initialised model on `support` alone: `baseline_epochs`
/// full-batch steps at rate α, folding each epoch's batch statistics into the
/// running BN buffers.
pub fn supervised_baseline(model_cfg: &ModelConfig, support: &[EpisodeItem], cfg: &TrainConfig, seed: u64) -> Result<Model> {
    let mut model = Model::init(model_cfg.clone(), seed)?;
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    let data = batch(support, model_cfg.n_classes)?;
    for epoch in 0..cfg.baseline_epochs {
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        let tl = task_loss(&mut g, model_cfg, &bound, &data).map_err(nonfinite_at(epoch))?;
        loss_value(&g, tl.loss, epoch)?;
        let grads = backward(&mut g, tl.loss, &bound).map_err(nonfinite_at(epoch))?;
        model.params = sgd_step(&model.params, &grads, cfg.alpha).map_err(nonfinite_at(epoch))?;
        model.bn.absorb(&tl.stats, model_cfg.bn_momentum);
    }
    Ok(model)
}

/// What a protocol trial adapts.
#[derive(Clone, Copy, Debug)]
pub enum Learner<'a> {
    /// Fine-tune a meta-learned initialisation.
    Meta(&'a Model),
    /// Train from scratch on the support set.
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub mean: f64,
    pub std: f64,
    pub trials: Vec<f64>,
}

impl ProtocolReport {
    pub fn from_trials(trials: Vec<f64>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::invalid("no trials"));
        }
        let n = trials.len() as f64;
        let mean = trials.iter().sum::<f64>() / n;
        let std = if trials.len() > 1 {
            (trials.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(ProtocolReport { mean, std, trials })
    }
}

/// Repeated target-task evaluation. Trial `i` draws its task from stream
/// `(seed, "trial", i)`, so trial `i` is unaffected by the trial count.
/// Meta learners fine-tune under their variant's fixed-class mode; the
/// supervised learner sees every class (fixed ones included) in its support.
#[allow(clippy::too_many_arguments)]
pub fn run_protocol(
    reg: &DatasetRegistry,
    spec: &EpisodeSpec,
    target_language: &str,
    learner: Learner<'_>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    trials: usize,
    eval_per_label: usize,
) -> Result<ProtocolReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    check_model_fits(model_cfg, spec)?;
    let accs: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, "trial", i as u64);
            let mode = match learner {
                Learner::Meta(_) => cfg.variant.fixed_mode(),
                Learner::Supervised => FixedMode::Ordinary,
            };
            let task = build_target_task_with(reg, spec, target_language, eval_per_label, mode, &mut r)?;
            let model = match learner {
                Learner::Meta(init) => fine_tune(init, &task.support, spec, cfg)?,
                Learner::Supervised => {
                    supervised_baseline(model_cfg, &task.support, cfg, rng::derive_seed(cfg.seed, "baseline-init", i as u64))?
                }
            };
            evaluate(&model, &task.eval_query)
        })
        .collect::<Result<_>>()?;
    ProtocolReport::from_trials(accs)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    model: ModelConfig,
    params: Vec<crate::tensor::ParamSpec>,
    bn: BnStats,
    config_hash: String,
    seed: u64,
}

const CHECKPOINT_FORMAT: &str = "fmaml-checkpoint-v1";

/// Checkpoint layout: `u64` LE header length, JSON header (names, shapes,
/// model config, running BN statistics, config hash, seed), then every
/// parameter value as LE `f64` in declaration order.
pub fn save_checkpoint(path: &Path, model: &Model, config_hash: &str, seed: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        model: model.config.clone(),
        params: model.params.specs(),
        bn: model.bn.clone(),
        config_hash: config_hash.into(),
        seed,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + 8 * model.params.numel());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in model.params.flat() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Loads a checkpoint; returns the model, config hash and seed.
pub fn load_checkpoint(path: &Path) -> Result<(Model, String, u64)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(bad(&format!("unknown format {}", header.format)));
    }
    let data = &bytes[8 + hlen..];
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if data.len() != total * 8 {
        return Err(bad(&format!("expected {total} values, found {} bytes", data.len())));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut entries = Vec::with_capacity(header.params.len());
    for spec in &header.params {
        let n = spec.shape.iter().product();
        entries.push((spec.name.clone(), Tensor::new(spec.shape.clone(), values.by_ref().take(n).collect())?));
    }
    let params = ParamSet::from_entries(entries)?;
    let expected = crate::model::init_params(&header.model, 0)?;
    if !params.is_congruent(&expected) {
        return Err(bad("parameter layout does not match the model config"));
    }
    Ok((Model { config: header.model, params, bn: header.bn }, header.config_hash, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_stats() {
        let r = ProtocolReport::from_trials(vec![0.5]).unwrap();
        assert_eq!((r.mean, r.std), (0.5, 0.0));
        let r = ProtocolReport::from_trials(vec![0.2, 0.4]).unwrap();
        assert!((r.mean - 0.3).abs() < 1e-15);
        assert!((r.std - (0.02f64).sqrt()).abs() < 1e-12);
        assert!(ProtocolReport::from_trials(vec![]).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.meta_batch, c.inner_steps), (0.1, 0.001, 16, 5));
        assert_eq!(c.finetune_steps(), 5);
        assert!(TrainConfig { alpha: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { meta_batch: 0, ..c }.validate().is_err());
    }

    #[test]
    fn head_mask_rows() {
        let m = head_mask(&[4, 3], 2).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let b = head_mask(&[4], 3).unwrap();
        assert_eq!(b.data(), &[1.0, 1.0, 1.0, 0.0]);
    }
}
