//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mobre::autodiff::Graph;
use mobre::model::{Binder, ClsMode, LocalFfn, ModelConfig};
use mobre::moe::{expert_prefix, ffn, init_block, moe_ffn, SequenceLayout};
use mobre::params::{normal, ModelParams};
use mobre::tokenizer::TokenizerConfig;
use mobre::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Trim by repeated linear scans for the smallest `(|v|, tensor, index)`.
pub fn oracle_trim(set: &[(String, Vec<f64>)], fraction: f64, per_tensor: bool) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = set.to_vec();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    let groups: Vec<Vec<usize>> = if per_tensor {
        (0..out.len()).map(|t| vec![t]).collect()
    } else {
        vec![(0..out.len()).collect()]
    };
    for group in groups {
        let total: usize = group.iter().map(|&t| out[t].1.len()).sum();
        let k = (fraction * total as f64).floor() as usize;
        let mut pruned: Vec<Vec<bool>> = out.iter().map(|(_, v)| vec![false; v.len()]).collect();
        for _ in 0..k {
            let mut best: Option<(f64, usize, usize)> = None;
            for &t in &group {
                for (i, &v) in out[t].1.iter().enumerate() {
                    if pruned[t][i] {
                        continue;
                    }
                    let cand = (v.abs(), t, i);
                    let better = match best {
                        None => true,
                        Some(b) => cand.0 < b.0 || (cand.0 == b.0 && (cand.1, cand.2) < (b.1, b.2)),
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, t, i) = best.unwrap();
            pruned[t][i] = true;
        }
        for &t in &group {
            for i in 0..out[t].1.len() {
                if pruned[t][i] {
                    out[t].1[i] = 0.0;
                }
            }
        }
    }
    out
}

/// Elect a sign from the (ascending-order) sum, then average the agreeing values.
pub fn oracle_merge_scalar(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for &x in &v {
        total += x;
    }
    if total == 0.0 {
        return 0.0;
    }
    let mut keep = Vec::new();
    for &x in &v {
        if (total > 0.0 && x > 0.0) || (total < 0.0 && x < 0.0) {
            keep.push(x);
        }
    }
    if keep.iter().all(|&x| x == keep[0]) {
        return keep[0];
    }
    let mut s = 0.0;
    for &x in &keep {
        s += x;
    }
    s / keep.len() as f64
}

pub fn oracle_merge(sets: &[Vec<(String, Vec<f64>)>]) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for (t, (name, first)) in sets[0].iter().enumerate() {
        let mut merged = Vec::with_capacity(first.len());
        for i in 0..first.len() {
            let column: Vec<f64> = sets.iter().map(|s| s[t].1[i]).collect();
            merged.push(oracle_merge_scalar(&column));
        }
        out.push((name.clone(), merged));
    }
    out
}

pub fn to_params(set: &[(String, Vec<f64>)]) -> ModelParams<f64> {
    let mut p = ModelParams::new();
    for (n, v) in set {
        p.insert(n.as_str(), Tensor::from_f64(&[v.len()], v));
    }
    p
}

pub fn from_params(p: &ModelParams<f64>) -> Vec<(String, Vec<f64>)> {
    p.iter().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
}

/// Random parameter sets with many ties, zeros and cancelling values.
pub fn random_sets(rng: &mut ChaCha8Rng) -> Vec<Vec<(String, Vec<f64>)>> {
    let m = rng.random_range(1..=5);
    let tensors = rng.random_range(1..=3);
    let sizes: Vec<usize> = (0..tensors).map(|_| rng.random_range(1..=12)).collect();
    let names = ["b.weight", "a.bias", "c.scale"];
    let palette = [-1.0, -0.5, 0.0, 0.5, 1.0, 0.25];
    (0..m)
        .map(|_| {
            sizes
                .iter()
                .enumerate()
                .map(|(t, &n)| {
                    let v = (0..n)
                        .map(|_| {
                            if rng.random_bool(0.6) {
                                palette[rng.random_range(0..palette.len())]
                            } else {
                                rng.random_range(-2.0..2.0)
                            }
                        })
                        .collect();
                    (names[t].to_string(), v)
                })
                .collect()
        })
        .collect()
}

pub struct MetricsOracle {
    pub accuracy: f64,
    pub kappa: f64,
    pub sensitivity: f64,
    pub weighted_f1: f64,
}

pub fn oracle_metrics(labels: &[usize], preds: &[usize], k: usize) -> MetricsOracle {
    let n = labels.len() as f64;
    let mut correct = 0.0;
    for i in 0..labels.len() {
        if labels[i] == preds[i] {
            correct += 1.0;
        }
    }
    let accuracy = correct / n;
    let mut pe = 0.0;
    for c in 0..k {
        let t = labels.iter().filter(|&&y| y == c).count() as f64;
        let p = preds.iter().filter(|&&y| y == c).count() as f64;
        pe += (t / n) * (p / n);
    }
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        if accuracy == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (accuracy - pe) / (1.0 - pe)
    };
    let mut recalls = Vec::new();
    let mut f1 = 0.0;
    for c in 0..k {
        let tp = (0..labels.len()).filter(|&i| labels[i] == c && preds[i] == c).count() as f64;
        let support = labels.iter().filter(|&&y| y == c).count() as f64;
        let predicted = preds.iter().filter(|&&y| y == c).count() as f64;
        let recall = if support > 0.0 { tp / support } else { 0.0 };
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        if support > 0.0 {
            recalls.push((c, recall));
        }
        if precision + recall > 0.0 {
            f1 += support / n * 2.0 * precision * recall / (precision + recall);
        }
    }
    let sensitivity = if k == 2 {
        recalls.iter().find(|r| r.0 == 1).map_or(0.0, |r| r.1)
    } else {
        recalls.iter().map(|r| r.1).sum::<f64>() / recalls.len() as f64
    };
    MetricsOracle {
        accuracy,
        kappa,
        sensitivity,
        weighted_f1: f1,
    }
}

pub fn block_config(d: usize, nx: usize, top_k: usize, regions: usize) -> ModelConfig {
    ModelConfig {
        tokenizer: TokenizerConfig {
            filters: vec![d],
            kernels: vec![3],
            strides: vec![2],
        },
        d_model: d,
        num_blocks: 1,
        num_heads: 1,
        mlp_hidden: 6,
        local_ffn: LocalFfn::Moe,
        num_experts: nx,
        top_k,
        num_regions: regions,
        max_patches: 8,
        task_classes: vec![2],
        cls_mode: ClsMode::TaskDisentangled,
        cls_width: 1,
        pred_head_hidden: 4,
    }
}

#[derive(Default, Debug)]
pub struct RoutingTally {
    pub forwards: usize,
    pub sparsity_violations: usize,
    pub coherence_violations: usize,
    pub gate_violations: usize,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// One randomized mixture forward checked against a direct recomputation:
/// gates from the channel sums, top-k by brute force, and each token's output
/// as the gate-weighted sum of expert outputs using its channel's gate vector.
pub fn routing_trial(rng: &mut ChaCha8Rng, tally: &mut RoutingTally) {
    let d = rng.random_range(2..=6);
    let nx = rng.random_range(1..=6);
    let top_k = rng.random_range(1..=nx);
    let regions = rng.random_range(1..=4);
    let c = rng.random_range(1..=5);
    let p = rng.random_range(1..=4);
    let cfg = block_config(d, nx, top_k, regions);
    let mut params = ModelParams::<f64>::new();
    init_block(rng, &cfg, 0, &mut params);
    let scale = rng.random_range(0.1..3.0);
    params.insert("blocks.0.router.weight", normal(rng, &[d, nx], scale));
    let layout = SequenceLayout {
        cls_rows: 0,
        num_patches: p,
        regions: (0..c).map(|_| rng.random_range(0..regions)).collect(),
        num_regions: regions,
    };
    let s = p * c;
    let h: Tensor<f64> = normal(rng, &[s, d], 1.0);

    let mut g = Graph::new();
    let mut b = Binder::new(&params);
    let hv = g.constant(h.clone());
    let out = moe_ffn(&mut g, &mut b, 0, hv, &layout, nx, top_k).unwrap();
    let got = g.value(out.out).clone();
    let dec = out.decision;
    tally.forwards += 1;

    let phi = params.get("blocks.0.router.weight").unwrap();
    let expected_nonzeros = top_k.min(nx);
    let mut gates = vec![vec![0.0; nx]; c];
    for ch in 0..c {
        let mut sum = vec![0.0; d];
        for row in 0..s {
            if row % c == ch {
                for j in 0..d {
                    sum[j] += h.data()[row * d + j];
                }
            }
        }
        let logits: Vec<f64> = (0..nx).map(|x| (0..d).map(|j| sum[j] * phi.data()[j * nx + x]).sum()).collect();
        let probs = softmax(&logits);
        let mut order: Vec<usize> = (0..nx).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let chosen = &order[..top_k];
        let z: f64 = chosen.iter().map(|&x| probs[x]).sum();
        for &x in chosen {
            gates[ch][x] = probs[x] / z;
        }
        let row = dec.gate_row(ch);
        if row.iter().filter(|&&v| v != 0.0).count() != expected_nonzeros {
            tally.sparsity_violations += 1;
        }
        if row.iter().zip(&gates[ch]).any(|(a, e)| (a - e).abs() > 1e-9) {
            tally.gate_violations += 1;
        }
    }

    let mut expert_out: BTreeMap<usize, Tensor<f64>> = BTreeMap::new();
    for x in 0..nx {
        let mut g2 = Graph::new();
        let mut b2 = Binder::new(&params);
        let hv2 = g2.constant(h.clone());
        let y = ffn(&mut g2, &mut b2, &expert_prefix(0, x), hv2).unwrap();
        expert_out.insert(x, g2.value(y).clone());
    }
    let mut coherent = true;
    for row in 0..s {
        let ch = row % c;
        for j in 0..d {
            let e: f64 = (0..nx).map(|x| gates[ch][x] * expert_out[&x].data()[row * d + j]).sum();
            if (got.data()[row * d + j] - e).abs() > 1e-9 * (1.0 + e.abs()) {
                coherent = false;
            }
        }
    }
    if !coherent {
        tally.coherence_violations += 1;
    }
}
