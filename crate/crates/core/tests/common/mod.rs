#![allow(dead_code)]

use std::sync::Arc;

use fmaml_core::audio::FeatureClip;
use fmaml_core::episodes::{Episode, EpisodeItem, Sample, SlotMap};
use fmaml_core::model::{BnStats, ModelConfig};
use fmaml_core::tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(classes: usize) -> ModelConfig {
    ModelConfig {
        in_h: 8,
        in_w: 8,
        blocks: 2,
        filters: 3,
        kernel: 3,
        pool_h: 3,
        pool_w: 3,
        n_classes: classes,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

/// One conv block and a head: the "2-layer" bilevel test model.
pub fn two_layer_config(classes: usize) -> ModelConfig {
    ModelConfig {
        in_h: 6,
        in_w: 6,
        blocks: 1,
        filters: 2,
        kernel: 3,
        pool_h: 2,
        pool_w: 2,
        n_classes: classes,
        bn_eps: 1e-5,
        bn_momentum: 0.1,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (r.random::<f64>() * 2.0 - 1.0)).unwrap()
}

/// Perturbs every parameter so BN shift/scale and biases are not at their
/// symmetric initial values.
pub fn jitter(p: &ParamSet, r: &mut ChaCha8Rng, scale: f64) -> ParamSet {
    let mut out = p.clone();
    for (name, t) in p.iter() {
        let data = t.data().iter().map(|v| v + scale * (r.random::<f64>() * 2.0 - 1.0)).collect();
        out.replace(name, Tensor::new(t.shape().to_vec(), data).unwrap()).unwrap();
    }
    out
}

pub fn labels(r: &mut ChaCha8Rng, batch: usize, classes: usize) -> (Vec<usize>, Tensor) {
    let l: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
    let t = Tensor::one_hot(&l, classes).unwrap();
    (l, t)
}

/// Straight-line re-implementation of the classifier, no tape involved.
pub fn reference_forward(cfg: &ModelConfig, p: &ParamSet, input: &Tensor, running: Option<&BnStats>) -> Vec<Vec<f64>> {
    let s = input.shape();
    let (b, mut h, mut w) = (s[0], s[2], s[3]);
    let mut c = 1;
    let mut x: Vec<f64> = input.data().to_vec();
    let k = cfg.kernel as isize;
    let pad = k / 2;
    for blk in 0..cfg.blocks {
        let wt = p.get(&format!("block{blk}.conv.weight")).unwrap().data();
        let bias = p.get(&format!("block{blk}.conv.bias")).unwrap().data();
        let gamma = p.get(&format!("block{blk}.bn.gamma")).unwrap().data();
        let beta = p.get(&format!("block{blk}.bn.beta")).unwrap().data();
        let f = cfg.filters;
        let at = |x: &Vec<f64>, n: usize, ch: usize, cc: usize, i: usize, j: usize, hh: usize, ww: usize| x[((n * cc + ch) * hh + i) * ww + j];
        let mut y = vec![0.0; b * f * h * w];
        for n in 0..b {
            for o in 0..f {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for di in 0..k {
                                for dj in 0..k {
                                    let (r, q) = (i as isize + di - pad, j as isize + dj - pad);
                                    if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                                        acc += at(&x, n, ci, c, r as usize, q as usize, h, w)
                                            * wt[((o * c + ci) * cfg.kernel + di as usize) * cfg.kernel + dj as usize];
                                    }
                                }
                            }
                        }
                        y[((n * f + o) * h + i) * w + j] = acc.max(0.0);
                    }
                }
            }
        }
        // batch norm per channel
        let cnt = (b * h * w) as f64;
        for o in 0..f {
            let (mean, var) = match running {
                Some(rs) => (rs.mean[blk][o], rs.var[blk][o]),
                None => {
                    let mut m = 0.0;
                    for n in 0..b {
                        for i in 0..h * w {
                            m += y[(n * f + o) * h * w + i];
                        }
                    }
                    m /= cnt;
                    let mut v = 0.0;
                    for n in 0..b {
                        for i in 0..h * w {
                            v += (y[(n * f + o) * h * w + i] - m).powi(2);
                        }
                    }
                    (m, v / cnt)
                }
            };
            let inv = 1.0 / (var + cfg.bn_eps).sqrt();
            for n in 0..b {
                for i in 0..h * w {
                    let e = &mut y[(n * f + o) * h * w + i];
                    *e = (*e - mean) * inv * gamma[o] + beta[o];
                }
            }
        }
        // 2×2 max pool, axes of length one kept
        let (ph, pw) = ((h / 2).max(1), (w / 2).max(1));
        let mut z = vec![0.0; b * f * ph * pw];
        for n in 0..b {
            for o in 0..f {
                for i in 0..ph {
                    for j in 0..pw {
                        let mut m = f64::NEG_INFINITY;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let (r, q) = (2 * i + di, 2 * j + dj);
                                if r < h && q < w {
                                    m = m.max(y[((n * f + o) * h + r) * w + q]);
                                }
                            }
                        }
                        z[((n * f + o) * ph + i) * pw + j] = m;
                    }
                }
            }
        }
        x = z;
        h = ph;
        w = pw;
        c = f;
    }
    // adaptive average pool
    let bins = |size: usize, out: usize| -> Vec<(usize, usize)> {
        (0..out).map(|i| (i * size / out, ((i + 1) * size + out - 1) / out)).collect()
    };
    let (hb, wb) = (bins(h, cfg.pool_h), bins(w, cfg.pool_w));
    let hw = p.get("head.weight").unwrap().data();
    let hbias = p.get("head.bias").unwrap().data();
    let d = cfg.flatten_width();
    let mut out = Vec::new();
    for n in 0..b {
        let mut flat = Vec::with_capacity(d);
        for ch in 0..c {
            for &(h0, h1) in &hb {
                for &(w0, w1) in &wb {
                    let mut s = 0.0;
                    for i in h0..h1 {
                        for j in w0..w1 {
                            s += x[((n * c + ch) * h + i) * w + j];
                        }
                    }
                    flat.push(s / ((h1 - h0) * (w1 - w0)) as f64);
                }
            }
        }
        let row: Vec<f64> = (0..cfg.n_classes)
            .map(|cl| hbias[cl] + (0..d).map(|t| hw[cl * d + t] * flat[t]).sum::<f64>())
            .collect();
        out.push(row);
    }
    out
}

/// Mean cross-entropy evaluated directly from the formula.
pub fn reference_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / logits.len() as f64
}

/// Episode item with a random `[h×w]` input; its clip is labelled `c{slot}`.
pub fn random_item(r: &mut ChaCha8Rng, h: usize, w: usize, slot: usize, id: usize) -> EpisodeItem {
    let input = random_tensor(r, &[h, w], 1.0);
    let clip = FeatureClip::new(input.clone(), format!("c{slot}"), "synthetic", format!("item{id}")).unwrap();
    EpisodeItem { sample: Arc::new(Sample { clip, input }), slot }
}

/// `per_slot` random items for every slot in `0..classes`.
pub fn random_items(r: &mut ChaCha8Rng, cfg: &ModelConfig, per_slot: usize, first_id: usize) -> Vec<EpisodeItem> {
    (0..cfg.n_classes * per_slot)
        .map(|i| random_item(r, cfg.in_h, cfg.in_w, i % cfg.n_classes, first_id + i))
        .collect()
}

/// Items whose inputs carry a strong slot-specific pattern plus noise.
pub fn separable_items(r: &mut ChaCha8Rng, cfg: &ModelConfig, per_slot: usize, first_id: usize) -> Vec<EpisodeItem> {
    (0..cfg.n_classes * per_slot)
        .map(|i| {
            let slot = i % cfg.n_classes;
            let input = Tensor::from_fn(&[cfg.in_h, cfg.in_w], |j| {
                let (y, x) = (j / cfg.in_w, j % cfg.in_w);
                let pattern = (((slot + 1) * (y + 1) + slot * x) as f64 * 0.9).sin();
                2.0 * pattern + 0.3 * (r.random::<f64>() * 2.0 - 1.0)
            })
            .unwrap();
            let clip = FeatureClip::new(input.clone(), format!("c{slot}"), "synthetic", format!("item{}", first_id + i)).unwrap();
            EpisodeItem { sample: Arc::new(Sample { clip, input }), slot }
        })
        .collect()
}

pub fn episode(id: u64, support: Vec<EpisodeItem>, query: Vec<EpisodeItem>, classes: usize) -> Episode {
    let labels = (0..classes).map(|s| format!("c{s}")).collect();
    Episode { id, support, query, slot_map: SlotMap::from_labels(labels).unwrap(), language: "synthetic".into() }
}
