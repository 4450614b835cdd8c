//! The convolutional classifier.
//!
//! Each block is `conv3×3 (+bias) → ReLU → batch norm → 2×2 max pool`. After
//! the last block an adaptive average pool fixes the spatial grid, so the
//! flattened width is `filters · pool_h · pool_w` for any input size (576 for
//! the default 64 filters on a 3×3 grid). A linear head maps to one output
//! slot per class.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{BoundParams, Graph, Layout3, ParamSet, Tensor, Var};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_h: usize,
    pub in_w: usize,
    pub blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    pub pool_h: usize,
    pub pool_w: usize,
    pub n_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// Four blocks of 64 filters over a 40×300 MFCC map.
    pub fn paper(n_classes: usize) -> Self {
        ModelConfig {
            in_h: 40,
            in_w: 300,
            blocks: 4,
            filters: 64,
            kernel: 3,
            pool_h: 3,
            pool_w: 3,
            n_classes,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn flatten_width(&self) -> usize {
        self.filters * self.pool_h * self.pool_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_h == 0 || self.in_w == 0 || self.blocks == 0 || self.filters == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.kernel % 2 == 0 || self.pool_h == 0 || self.pool_w == 0 || self.n_classes < 2 {
            return Err(Error::invalid("kernel must be odd, pool grid positive, and at least 2 classes"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_eps must be positive and bn_momentum in [0, 1]"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let mut n = 0;
        let mut cin = 1;
        for _ in 0..self.blocks {
            n += self.filters * cin * k2 + 3 * self.filters;
            cin = self.filters;
        }
        n + self.n_classes * self.flatten_width() + self.n_classes
    }
}

fn conv_w(i: usize) -> String {
    format!("block{i}.conv.weight")
}
fn conv_b(i: usize) -> String {
    format!("block{i}.conv.bias")
}
fn bn_gamma(i: usize) -> String {
    format!("block{i}.bn.gamma")
}
fn bn_beta(i: usize) -> String {
    format!("block{i}.bn.beta")
}

/// Per-block batch-norm statistics (one entry per filter).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl BnStats {
    pub fn fresh(cfg: &ModelConfig) -> Self {
        BnStats {
            mean: vec![vec![0.0; cfg.filters]; cfg.blocks],
            var: vec![vec![1.0; cfg.filters]; cfg.blocks],
        }
    }

    /// Exponential moving average toward `batch`.
    pub fn absorb(&mut self, batch: &BnStats, momentum: f64) {
        for (run, new) in self.mean.iter_mut().zip(&batch.mean).chain(self.var.iter_mut().zip(&batch.var)) {
            for (r, n) in run.iter_mut().zip(new) {
                *r = (1.0 - momentum) * *r + momentum * n;
            }
        }
    }

    /// Elementwise mean of several statistics, in the given order.
    pub fn average(items: &[BnStats]) -> Option<BnStats> {
        let first = items.first()?;
        let mut out = first.clone();
        for s in &items[1..] {
            for (a, b) in out.mean.iter_mut().zip(&s.mean).chain(out.var.iter_mut().zip(&s.var)) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        let inv = 1.0 / items.len() as f64;
        for row in out.mean.iter_mut().chain(out.var.iter_mut()) {
            for x in row {
                *x *= inv;
            }
        }
        Some(out)
    }
}

/// Parameters plus the running batch-norm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub bn: BnStats,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        let bn = BnStats::fresh(&config);
        Ok(Model { config, params, bn })
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        Model { config: self.config.clone(), params, bn: self.bn.clone() }
    }
}

/// He-normal conv kernels, zero conv biases, unit BN scale, zero BN shift,
/// uniform `±1/√fan_in` head weights, zero head bias.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "model-init", 0);
    let mut p = ParamSet::new();
    let k2 = cfg.kernel * cfg.kernel;
    let mut cin = 1;
    for i in 0..cfg.blocks {
        let std = (2.0 / (cin * k2) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let shape = [cfg.filters, cin, cfg.kernel, cfg.kernel];
        p.insert(conv_w(i), Tensor::from_fn(&shape, |_| normal.sample(&mut r))?)?;
        p.insert(conv_b(i), Tensor::zeros(&[cfg.filters]))?;
        p.insert(bn_gamma(i), Tensor::full(&[cfg.filters], 1.0))?;
        p.insert(bn_beta(i), Tensor::zeros(&[cfg.filters]))?;
        cin = cfg.filters;
    }
    let d = cfg.flatten_width();
    let bound = 1.0 / (d as f64).sqrt();
    let uni = Uniform::new(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
    p.insert(HEAD_WEIGHT, Tensor::from_fn(&[cfg.n_classes, d], |_| uni.sample(&mut r))?)?;
    p.insert(HEAD_BIAS, Tensor::zeros(&[cfg.n_classes]))?;
    Ok(p)
}

/// Which statistics the batch-norm layers normalise with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Batch,
    Running(&'a BnStats),
}

pub struct Forward {
    pub logits: Var,
    /// Batch statistics per block, present in [`BnMode::Batch`].
    pub batch_stats: Option<BnStats>,
}

/// Logits `[B × n_classes]` for an input batch `[B × 1 × in_h × in_w]`.
pub fn forward(g: &mut Graph, cfg: &ModelConfig, p: &BoundParams, input: Var, mode: BnMode<'_>) -> Result<Forward> {
    let shape = g.value(input)?.shape().to_vec();
    let batch = match shape[..] {
        [b, 1, h, w] if h == cfg.in_h && w == cfg.in_w && b > 0 => b,
        _ => {
            return Err(Error::shape(format!(
                "model expects [B×1×{}×{}], got {shape:?}",
                cfg.in_h, cfg.in_w
            )))
        }
    };
    let mut x = input;
    let mut stats = BnStats { mean: Vec::new(), var: Vec::new() };
    for i in 0..cfg.blocks {
        x = g.conv2d(x, p.var(&conv_w(i))?)?;
        let s = g.value(x)?.shape().to_vec();
        let chan = Layout3 { outer: s[0], mid: s[1], inner: s[2] * s[3] };
        let bias = g.broadcast(p.var(&conv_b(i))?, chan, &s)?;
        x = g.add(x, bias)?;
        x = g.relu(x)?;
        x = match mode {
            BnMode::Batch => {
                let (y, mean, var) = batch_norm_train(g, x, chan, &s, cfg.bn_eps)?;
                stats.mean.push(mean);
                stats.var.push(var);
                y
            }
            BnMode::Running(run) => {
                let (mean, var) = (&run.mean[i], &run.var[i]);
                let mc = Tensor::new(vec![mean.len()], mean.clone())?;
                let ic = Tensor::new(vec![var.len()], var.iter().map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).collect())?;
                let mc = g.constant(mc);
                let ic = g.constant(ic);
                let mb = g.broadcast(mc, chan, &s)?;
                let ib = g.broadcast(ic, chan, &s)?;
                let xc = g.sub(x, mb)?;
                g.mul(xc, ib)?
            }
        };
        let gamma = g.broadcast(p.var(&bn_gamma(i))?, chan, &s)?;
        let beta = g.broadcast(p.var(&bn_beta(i))?, chan, &s)?;
        x = g.mul(x, gamma)?;
        x = g.add(x, beta)?;
        x = g.maxpool2x2(x)?;
    }
    x = g.adaptive_avg_pool(x, cfg.pool_h, cfg.pool_w)?;
    let flat = g.reshape(x, &[batch, cfg.flatten_width()])?;
    let wt = g.transpose(p.var(HEAD_WEIGHT)?)?;
    let logits = g.matmul(flat, wt)?;
    let rows = Layout3 { outer: batch, mid: cfg.n_classes, inner: 1 };
    let bias = g.broadcast(p.var(HEAD_BIAS)?, rows, &[batch, cfg.n_classes])?;
    let logits = g.add(logits, bias)?;
    let batch_stats = matches!(mode, BnMode::Batch).then_some(stats);
    Ok(Forward { logits, batch_stats })
}

/// Normalises with the biased batch variance; returns the statistics as values.
fn batch_norm_train(g: &mut Graph, x: Var, chan: Layout3, shape: &[usize], eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let count = (chan.outer * chan.inner) as f64;
    let sum = g.reduce(x, chan)?;
    let mean = g.scale(sum, 1.0 / count)?;
    let mb = g.broadcast(mean, chan, shape)?;
    let xc = g.sub(x, mb)?;
    let sq = g.mul(xc, xc)?;
    let ss = g.reduce(sq, chan)?;
    let var = g.scale(ss, 1.0 / count)?;
    let eps_t = Tensor::full(g.value(var)?.shape(), eps);
    let eps_v = g.constant(eps_t);
    let ve = g.add(var, eps_v)?;
    let inv = g.powf(ve, -0.5)?;
    let ib = g.broadcast(inv, chan, shape)?;
    let y = g.mul(xc, ib)?;
    Ok((y, g.value(mean)?.to_vec(), g.value(var)?.to_vec()))
}

/// Stacks `[H×W]` feature maps into a `[B×1×H×W]` batch.
pub fn batch_input(items: &[&Tensor]) -> Result<Tensor> {
    let stacked = Tensor::stack(items)?;
    match *stacked.shape() {
        [b, h, w] => stacked.reshape(&[b, 1, h, w]),
        _ => Err(Error::shape(format!("expected [H×W] maps, got {:?}", stacked.shape()))),
    }
}

/// Forward pass without recording gradients; returns logits values.
pub fn predict(model: &Model, input: &Tensor, mode: BnMode<'_>) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g);
    let x = g.constant(input.clone());
    let out = forward(&mut g, &model.config, &bound, x, mode)?;
    Ok(g.value(out.logits)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_flatten_is_576() {
        assert_eq!(ModelConfig::paper(7).flatten_width(), 576);
    }

    #[test]
    fn param_count_matches_init() {
        let cfg = ModelConfig { in_h: 8, in_w: 8, blocks: 2, filters: 3, pool_h: 2, pool_w: 2, ..ModelConfig::paper(4) };
        let p = init_params(&cfg, 0).unwrap();
        assert_eq!(p.numel(), cfg.param_count());
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = ModelConfig { in_h: 8, in_w: 8, blocks: 2, filters: 3, ..ModelConfig::paper(4) };
        let m = Model::init(cfg, 1).unwrap();
        let zeroed = m.with_params(m.params.zeros_like());
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f64 * 0.37).sin()).unwrap();
        let logits = predict(&zeroed, &x, BnMode::Batch).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let cfg = ModelConfig { in_h: 8, in_w: 8, blocks: 1, filters: 2, ..ModelConfig::paper(3) };
        let m = Model::init(cfg, 1).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 9]);
        assert!(matches!(predict(&m, &x, BnMode::Batch), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig { in_h: 8, in_w: 8, blocks: 2, filters: 3, ..ModelConfig::paper(4) };
        assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
        assert_ne!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 10).unwrap());
    }
}
