//! End-to-end drivers: corpus preparation, pretraining, merging, supervised
//! training, ablation variants and leave-one-subject-out runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::coupcycle::{merge_models, upcycle_init};
use crate::error::{MobreError, Result};
use crate::model::{init_model, ClsMode, LocalFfn, ModelConfig};
use crate::params::{derive_seed, stream_tag, ModelParams};
use crate::preprocess::preprocess;
use crate::rmae::pretrain_subject;
use crate::scalar::Scalar;
use crate::synth::{generate_corpus, Recording};
use crate::train::{check_loso, evaluate, split_corpus, train, MetricsReport, Splits, TrainConfig};

/// Synthesizes and preprocesses the corpus described by `cfg`.
pub fn prepare_corpus(cfg: &ExperimentConfig) -> Result<Vec<Recording>> {
    generate_corpus(&cfg.synth)?
        .iter()
        .map(|r| preprocess(r, &cfg.preprocess))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Tokenizer and a dense transformer with one shared CLS token.
    TokenizerOnly,
    /// Adds channel-wise mixture-of-experts routing.
    BrMoe,
    /// Adds task-disentangled CLS aggregation.
    Tia,
    /// Adds regional masked pretraining and co-upcycling: the full model.
    Full,
    /// Full model with a given expert count.
    Experts(usize),
    /// Full model with `blocks` transformer blocks of width `d_model`.
    Size { blocks: usize, d_model: usize },
}

pub const VARIANT_NAMES: [&str; 4] = ["tokenizer-only", "brmoe", "tia", "rmae"];

impl Variant {
    /// Accepts `tokenizer-only`, `brmoe`, `tia`, `rmae` (or `full`),
    /// `experts-N` and `size-BxD`.
    pub fn parse(name: &str) -> Result<Self> {
        let unknown = || MobreError::UnknownVariant(name.to_string());
        Ok(match name {
            "tokenizer-only" => Variant::TokenizerOnly,
            "brmoe" => Variant::BrMoe,
            "tia" => Variant::Tia,
            "rmae" | "full" => Variant::Full,
            _ => {
                if let Some(n) = name.strip_prefix("experts-") {
                    let n: usize = n.parse().map_err(|_| unknown())?;
                    if n == 0 {
                        return Err(unknown());
                    }
                    Variant::Experts(n)
                } else if let Some(s) = name.strip_prefix("size-") {
                    let (b, d) = s.split_once('x').ok_or_else(unknown)?;
                    Variant::Size {
                        blocks: b.parse().map_err(|_| unknown())?,
                        d_model: d.parse().map_err(|_| unknown())?,
                    }
                } else {
                    return Err(unknown());
                }
            }
        })
    }

    pub fn uses_rmae(self) -> bool {
        !matches!(self, Variant::TokenizerOnly | Variant::BrMoe | Variant::Tia)
    }

    /// Architecture for this variant derived from the base configuration.
    pub fn model_config(self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut m = base.clone();
        match self {
            Variant::TokenizerOnly => {
                m.local_ffn = LocalFfn::Dense;
                m.cls_mode = ClsMode::Shared;
            }
            Variant::BrMoe => {
                m.local_ffn = LocalFfn::Moe;
                m.cls_mode = ClsMode::Shared;
            }
            Variant::Tia | Variant::Full => {
                m.local_ffn = LocalFfn::Moe;
                m.cls_mode = ClsMode::TaskDisentangled;
            }
            Variant::Experts(n) => {
                m.local_ffn = LocalFfn::Moe;
                m.cls_mode = ClsMode::TaskDisentangled;
                m.num_experts = n;
                m.top_k = m.top_k.min(n);
            }
            Variant::Size { blocks, d_model } => {
                m.local_ffn = LocalFfn::Moe;
                m.cls_mode = ClsMode::TaskDisentangled;
                m.num_blocks = blocks;
                m.mlp_hidden = m.mlp_hidden * d_model / m.d_model.max(1);
                m.d_model = d_model;
                if let Some(last) = m.tokenizer.filters.last_mut() {
                    *last = d_model;
                }
            }
        }
        m.validate()?;
        Ok(m)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::TokenizerOnly => f.write_str("tokenizer-only"),
            Variant::BrMoe => f.write_str("brmoe"),
            Variant::Tia => f.write_str("tia"),
            Variant::Full => f.write_str("rmae"),
            Variant::Experts(n) => write!(f, "experts-{n}"),
            Variant::Size { blocks, d_model } => write!(f, "size-{blocks}x{d_model}"),
        }
    }
}

pub fn model_init_seed(seed: u64) -> u64 {
    derive_seed(seed, stream_tag("model-init"))
}

pub fn rmae_init_seed(seed: u64) -> u64 {
    derive_seed(seed, stream_tag("rmae-init"))
}

pub fn rmae_subject_seed(seed: u64, subject: usize) -> u64 {
    derive_seed(seed, stream_tag("rmae") ^ subject as u64)
}

/// Subject-specific pretrained dense models, in ascending subject order.
pub struct Pretrained<T> {
    pub subjects: Vec<usize>,
    pub params: Vec<ModelParams<T>>,
    pub losses: Vec<Vec<f64>>,
    pub region_sets: Vec<Vec<usize>>,
}

/// Pretrains one dense model per subject on the recordings in `indices`.
/// Every subject model starts from the same initialization.
pub fn pretrain_all<T: Scalar>(
    corpus: &[Recording],
    indices: &[usize],
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<Pretrained<T>> {
    let dense = model.dense();
    let mut by_subject: BTreeMap<usize, Vec<Recording>> = BTreeMap::new();
    for &i in indices {
        by_subject.entry(corpus[i].subject_id).or_default().push(corpus[i].clone());
    }
    let mut out = Pretrained {
        subjects: Vec::new(),
        params: Vec::new(),
        losses: Vec::new(),
        region_sets: Vec::new(),
    };
    for (s, recs) in by_subject {
        let regions: BTreeSet<usize> = recs.iter().flat_map(|r| r.region_map.present_regions()).collect();
        let o = pretrain_subject::<T>(&dense, &cfg.rmae, &recs, rmae_init_seed(seed), rmae_subject_seed(seed, s))?;
        out.subjects.push(s);
        out.params.push(o.params);
        out.losses.push(o.losses);
        out.region_sets.push(regions.into_iter().collect());
    }
    Ok(out)
}

/// Merged shared tensors, cached per seed and dense architecture.
#[derive(Default)]
pub struct MergeCache<T> {
    entries: BTreeMap<(u64, String), ModelParams<T>>,
}

impl<T: Scalar> MergeCache<T> {
    pub fn new() -> Self {
        MergeCache {
            entries: BTreeMap::new(),
        }
    }

    pub fn get_or_build(
        &mut self,
        corpus: &[Recording],
        indices: &[usize],
        cfg: &ExperimentConfig,
        model: &ModelConfig,
        seed: u64,
    ) -> Result<&ModelParams<T>> {
        let key = (seed, serde_json::to_string(&model.dense()).expect("config serializes"));
        if !self.entries.contains_key(&key) {
            let pre = pretrain_all::<T>(corpus, indices, cfg, model, seed)?;
            let merged = merge_models(&pre.params, &pre.region_sets, &cfg.merge)?;
            self.entries.insert(key.clone(), merged);
        }
        Ok(&self.entries[&key])
    }
}

pub struct VariantRun<T> {
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub params: ModelParams<T>,
    pub loss_curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
    pub report: MetricsReport,
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

/// Initialization for `variant`: upcycled from merged pretrained tensors when
/// the variant uses pretraining, otherwise fresh.
pub fn variant_init<T: Scalar>(
    corpus: &[Recording],
    pretrain_indices: &[usize],
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    cache: &mut MergeCache<T>,
) -> Result<(ModelConfig, ModelParams<T>)> {
    let model = variant.model_config(&cfg.model)?;
    let init = if variant.uses_rmae() {
        let merged = cache.get_or_build(corpus, pretrain_indices, cfg, &model, seed)?;
        upcycle_init(merged, &model, model_init_seed(seed))?
    } else {
        init_model(&model, model_init_seed(seed))?
    };
    Ok((model, init))
}

/// Trains `variant` on the seed's training split and evaluates on its test split.
pub fn run_variant<T: Scalar>(
    corpus: &[Recording],
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    cache: &mut MergeCache<T>,
) -> Result<VariantRun<T>> {
    let tcfg = train_config(cfg, seed);
    let splits = split_corpus(corpus, tcfg.test_fraction, tcfg.val_fraction, seed);
    let (model, init) = variant_init(corpus, &splits.train, cfg, variant, seed, cache)?;
    let outcome = train(corpus, &splits, init, &model, &tcfg)?;
    let report = evaluate(&outcome.params, &model, corpus, &splits.test)?;
    Ok(VariantRun {
        variant,
        seed,
        model,
        params: outcome.params,
        loss_curve: outcome.loss_curve,
        val_curve: outcome.val_curve,
        report,
    })
}

/// Holds out one subject: pretraining, merging and training see only the
/// other subjects, then every recording of the held-out subject is evaluated.
pub fn loso_run<T: Scalar>(
    corpus: &[Recording],
    cfg: &ExperimentConfig,
    held_out: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let train_subjects: Vec<usize> = corpus
        .iter()
        .map(|r| r.subject_id)
        .filter(|&s| s != held_out)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    check_loso(corpus, held_out, &train_subjects, cfg.model.num_regions)?;
    let train_corpus: Vec<Recording> = corpus.iter().filter(|r| r.subject_id != held_out).cloned().collect();
    let held: Vec<Recording> = corpus.iter().filter(|r| r.subject_id == held_out).cloned().collect();
    let tcfg = train_config(cfg, seed);
    let splits: Splits = split_corpus(&train_corpus, 0.0, tcfg.val_fraction, seed);
    let mut cache = MergeCache::new();
    let (model, init) = variant_init::<T>(&train_corpus, &splits.train, cfg, Variant::Full, seed, &mut cache)?;
    let outcome = train(&train_corpus, &splits, init, &model, &tcfg)?;
    let all: Vec<usize> = (0..held.len()).collect();
    evaluate(&outcome.params, &model, &held, &all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for name in ["tokenizer-only", "brmoe", "tia", "rmae", "experts-4", "size-2x16"] {
            assert_eq!(Variant::parse(name).unwrap().to_string(), name);
        }
        assert_eq!(Variant::parse("full").unwrap(), Variant::Full);
        for bad in ["moe", "experts-", "experts-0", "size-3", "size-ax4", ""] {
            assert!(matches!(Variant::parse(bad), Err(MobreError::UnknownVariant(_))), "{bad}");
        }
    }

    #[test]
    fn tokenizer_only_has_no_expert_parameters() {
        let cfg = ExperimentConfig::tiny();
        let m = Variant::TokenizerOnly.model_config(&cfg.model).unwrap();
        let p = init_model::<f64>(&m, 0).unwrap();
        assert_eq!(p.count_matching(|n| n.contains(".experts.") || n.contains(".router.")), 0);
        let m = Variant::BrMoe.model_config(&cfg.model).unwrap();
        let p = init_model::<f64>(&m, 0).unwrap();
        assert!(p.count_matching(|n| n.contains(".experts.")) > 0);
    }

    #[test]
    fn expert_variant_clamps_top_k() {
        let cfg = ExperimentConfig::tiny();
        let m = Variant::Experts(1).model_config(&cfg.model).unwrap();
        assert_eq!((m.num_experts, m.top_k), (1, 1));
    }
}
