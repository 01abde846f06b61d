//! Supervised multi-subject, multi-task training and evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{MobreError, Result};
use crate::metrics::{self, TaskMetrics};
use crate::model::{forward, loss, predict, Binder, ForwardOptions, ModelConfig};
use crate::moe::{batch_balance_loss, RouterDecision};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{derive_seed, stream_tag, ModelParams};
use crate::rmae::channel_input;
use crate::scalar::{DType, Scalar};
use crate::synth::Recording;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// `batch_size` recordings from every subject per step; each recording
    /// carries a label for every task.
    PerSubjectPerTask,
    /// `batch_size × subjects` recordings drawn from the pooled training set.
    PooledPerSubject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub aux_weight: f64,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            batch_mode: BatchMode::PerSubjectPerTask,
            aux_weight: 0.01,
            optimizer: AdamWConfig::default(),
            seed: 0,
            test_fraction: 0.2,
            val_fraction: 0.2,
            dtype: DType::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr <= 0.0 || self.batch_size == 0 {
            return Err(MobreError::Config("learning rate and batch size must be positive".into()));
        }
        for f in [self.test_fraction, self.val_fraction] {
            if !(0.0..1.0).contains(&f) {
                return Err(MobreError::Config(format!("split fraction {f} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Indices into the corpus, per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-subject split stratified by the first task's class: each subject's
/// recordings are interleaved class by class, so every prefix is close to
/// class-balanced; the test set is the first prefix, validation the next.
pub fn split_corpus(corpus: &[Recording], test_fraction: f64, val_fraction: f64, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream_tag("split")));
    let subjects: BTreeSet<usize> = corpus.iter().map(|r| r.subject_id).collect();
    let mut out = Splits::default();
    for s in subjects {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in corpus.iter().enumerate().filter(|(_, r)| r.subject_id == s) {
            let key = r.labels.values().next().copied().unwrap_or(0);
            by_class.entry(key).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = by_class.into_values().collect();
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        groups.shuffle(&mut rng);
        let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
        let order: Vec<usize> = (0..longest)
            .flat_map(|k| groups.iter().filter_map(move |g| g.get(k).copied()))
            .collect();
        let n = order.len();
        let n_test = (test_fraction * n as f64).round() as usize;
        let n_val = (val_fraction * (n - n_test) as f64).round() as usize;
        out.test.extend(&order[..n_test]);
        out.val.extend(&order[n_test..n_test + n_val]);
        out.train.extend(&order[n_test + n_val..]);
    }
    out
}

pub struct TrainOutcome<T> {
    /// Parameters at the epoch with the best validation mean accuracy.
    pub params: ModelParams<T>,
    /// `(epoch, mean training loss)`
    pub loss_curve: Vec<(usize, f64)>,
    /// `(epoch, validation mean accuracy)`
    pub val_curve: Vec<(usize, f64)>,
    pub best_epoch: usize,
}

fn batches(corpus: &[Recording], train: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut per_subject: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in train {
        per_subject.entry(corpus[i].subject_id).or_default().push(i);
    }
    match cfg.batch_mode {
        BatchMode::PerSubjectPerTask => {
            for v in per_subject.values_mut() {
                v.shuffle(rng);
            }
            let longest = per_subject.values().map(Vec::len).max().unwrap_or(0);
            let steps = longest.div_ceil(cfg.batch_size);
            (0..steps)
                .map(|k| {
                    per_subject
                        .values()
                        .flat_map(|v| (0..cfg.batch_size).map(move |j| v[(k * cfg.batch_size + j) % v.len()]))
                        .collect()
                })
                .collect()
        }
        BatchMode::PooledPerSubject => {
            let mut all = train.to_vec();
            all.shuffle(rng);
            all.chunks(cfg.batch_size * per_subject.len().max(1)).map(<[usize]>::to_vec).collect()
        }
    }
}

/// Mean batch cross-entropy plus `aux_weight` times the balance loss pooled
/// over the batch; returns the loss value and per-parameter gradients.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    recs: &[&Recording],
    aux_weight: f64,
) -> Result<(f64, BTreeMap<String, crate::tensor::Tensor<T>>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let mut total: Option<Var> = None;
    let mut outs = Vec::with_capacity(recs.len());
    for r in recs {
        let input = channel_input::<T>(r);
        let out = forward(&mut g, &mut b, cfg, &input, ForwardOptions::default())?;
        let l = loss(&mut g, &out, &r.labels, 0.0)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
        outs.push(out);
    }
    let total = total.ok_or_else(|| MobreError::EmptySplit("training batch".into()))?;
    let mut mean = g.scale(total, T::from_f64c(1.0 / recs.len() as f64));
    if aux_weight != 0.0 {
        let samples: Vec<(&[Var], &[RouterDecision])> = outs
            .iter()
            .map(|o| (o.router_probs.as_slice(), o.decisions.as_slice()))
            .collect();
        if let Some(aux) = batch_balance_loss(&mut g, &samples) {
            let a = g.scale(aux, T::from_f64c(aux_weight));
            mean = g.add(mean, a);
        }
    }
    let value = g.value(mean).data()[0].to_f64c();
    if !value.is_finite() {
        return Err(MobreError::NonFinite("training loss".into()));
    }
    Ok((value, b.collect_grads(&g.backward(mean))))
}

pub fn train<T: Scalar>(
    corpus: &[Recording],
    splits: &Splits,
    init: ModelParams<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(MobreError::EmptySplit("train".into()));
    }
    let mut params = init;
    let mut best = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream_tag("batches")));
    let mut opt = AdamW::<T>::new(cfg.optimizer.clone());
    let steps_per_epoch = batches(corpus, &splits.train, cfg, &mut rng.clone()).len();
    let total = cfg.epochs * steps_per_epoch;
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut acc_loss = 0.0;
        let plan = batches(corpus, &splits.train, cfg, &mut rng);
        for batch in &plan {
            let recs: Vec<&Recording> = batch.iter().map(|&i| &corpus[i]).collect();
            let (l, grads) = batch_gradients(&params, model, &recs, cfg.aux_weight).map_err(|e| match e {
                MobreError::NonFinite(what) => MobreError::NonFinite(format!("{what} at epoch {epoch}, step {step}")),
                other => other,
            })?;
            acc_loss += l;
            opt.step(&mut params, &grads, cosine_lr(cfg.optimizer.lr, step, total));
            step += 1;
        }
        loss_curve.push((epoch, acc_loss / plan.len() as f64));
        let val_acc = if splits.val.is_empty() {
            -(acc_loss / plan.len() as f64)
        } else {
            evaluate(&params, model, corpus, &splits.val)?.mean_accuracy()
        };
        val_curve.push((epoch, val_acc));
        if val_acc > best_acc {
            best_acc = val_acc;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    if cfg.epochs == 0 {
        best = params;
    }
    Ok(TrainOutcome {
        params: best,
        loss_curve,
        val_curve,
        best_epoch,
    })
}

/// Token-level expert load per layer, `[layer][expert]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub num_regions: usize,
    pub num_experts: usize,
    /// `[layer][region * N_x + expert]`
    pub dispatch: Vec<Vec<u64>>,
}

impl Utilization {
    pub fn add(&mut self, decisions: &[RouterDecision]) {
        if decisions.is_empty() {
            return;
        }
        if self.dispatch.is_empty() {
            self.num_regions = decisions[0].num_regions;
            self.num_experts = decisions[0].num_experts;
            self.dispatch = vec![vec![0; self.num_regions * self.num_experts]; decisions.len()];
        }
        for (acc, d) in self.dispatch.iter_mut().zip(decisions) {
            for (a, &c) in acc.iter_mut().zip(&d.dispatch_counts) {
                *a += c;
            }
        }
    }

    /// Variance over experts of each expert's share of dispatched tokens,
    /// averaged over layers.
    pub fn variance(&self) -> f64 {
        if self.dispatch.is_empty() {
            return 0.0;
        }
        let nx = self.num_experts;
        let per_layer: Vec<f64> = self
            .dispatch
            .iter()
            .map(|layer| {
                let load: Vec<f64> = (0..nx)
                    .map(|x| (0..self.num_regions).map(|r| layer[r * nx + x]).sum::<u64>() as f64)
                    .collect();
                let total: f64 = load.iter().sum();
                let share: Vec<f64> = load.iter().map(|l| l / total).collect();
                metrics::mean_std(&share).1.powi(2)
            })
            .collect();
        per_layer.iter().sum::<f64>() / per_layer.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
    pub utilization: Utilization,
    pub num_samples: usize,
}

impl MetricsReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.accuracy).sum::<f64>() / self.tasks.len() as f64
    }
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    corpus: &[Recording],
    indices: &[usize],
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(MobreError::EmptySplit("evaluation".into()));
    }
    let n = cfg.num_tasks();
    let mut labels = vec![Vec::new(); n];
    let mut preds = vec![Vec::new(); n];
    let mut util = Utilization::default();
    for &i in indices {
        let r = &corpus[i];
        let p = predict(params, cfg, &channel_input::<T>(r))?;
        util.add(&p.decisions);
        for (&task, &class) in &r.labels {
            if task >= n {
                return Err(MobreError::UnknownTask(task));
            }
            labels[task].push(class);
            preds[task].push(p.classes[task]);
        }
    }
    let tasks = (0..n)
        .map(|t| metrics::compute(&labels[t], &preds[t], cfg.task_classes[t]))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        tasks,
        utilization: util,
        num_samples: indices.len(),
    })
}

/// Checks a leave-one-subject-out request and returns the training subjects.
pub fn check_loso(corpus: &[Recording], held_out: usize, train_subjects: &[usize], num_regions: usize) -> Result<()> {
    if train_subjects.contains(&held_out) {
        return Err(MobreError::HeldOut(format!("subject {held_out} is also a training subject")));
    }
    let held: Vec<&Recording> = corpus.iter().filter(|r| r.subject_id == held_out).collect();
    if held.is_empty() {
        return Err(MobreError::HeldOut(format!("subject {held_out} not in corpus")));
    }
    let covered: BTreeSet<usize> = corpus
        .iter()
        .filter(|r| train_subjects.contains(&r.subject_id))
        .flat_map(|r| r.region_map.channel_to_region.iter().copied())
        .collect();
    for r in held {
        for &q in &r.region_map.channel_to_region {
            if q >= num_regions || !covered.contains(&q) {
                return Err(MobreError::HeldOut(format!(
                    "held-out subject {held_out} uses region {q} absent from the training vocabulary"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SubjectSpec, SynthConfig};

    fn corpus() -> Vec<Recording> {
        generate_corpus(&SynthConfig {
            subjects: vec![
                SubjectSpec {
                    channels: 4,
                    channel_to_region: None,
                },
                SubjectSpec {
                    channels: 5,
                    channel_to_region: None,
                },
            ],
            samples_per_class: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_cover_corpus() {
        let c = corpus();
        let s = split_corpus(&c, 0.2, 0.2, 3);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
        assert_eq!(s.test.len(), 2 * 23);
        assert_eq!(split_corpus(&c, 0.2, 0.2, 3), s);
    }

    #[test]
    fn test_split_is_class_balanced() {
        let c = corpus();
        let s = split_corpus(&c, 0.2, 0.2, 1);
        let mut counts = BTreeMap::new();
        for &i in s.test.iter().filter(|&&i| c[i].subject_id == 0) {
            *counts.entry(c[i].labels[&0]).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 23);
        assert!(counts.values().all(|&v| v == 1));
    }

    #[test]
    fn per_subject_batches_draw_from_every_subject() {
        let c = corpus();
        let s = split_corpus(&c, 0.2, 0.2, 0);
        let cfg = TrainConfig {
            batch_size: 3,
            ..Default::default()
        };
        let b = batches(&c, &s.train, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        for batch in &b {
            assert_eq!(batch.len(), 6);
            assert_eq!(batch.iter().filter(|&&i| c[i].subject_id == 0).count(), 3);
        }
    }

    #[test]
    fn loso_contract() {
        let c = corpus();
        assert!(check_loso(&c, 1, &[0], 4).is_ok());
        assert!(matches!(check_loso(&c, 1, &[0, 1], 4), Err(MobreError::HeldOut(_))));
        assert!(matches!(check_loso(&c, 1, &[0], 3), Err(MobreError::HeldOut(_))));
    }

    #[test]
    fn uniform_load_has_zero_variance() {
        let u = Utilization {
            num_regions: 1,
            num_experts: 4,
            dispatch: vec![vec![5, 5, 5, 5], vec![10, 0, 0, 10]],
        };
        assert!((u.variance() - 0.03125).abs() < 1e-15);
    }
}
