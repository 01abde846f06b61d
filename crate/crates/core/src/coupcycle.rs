//! Co-upcycling: merge subject-specific dense models into one initialization.
//!
//! Shared tensors are trimmed (lowest magnitudes zeroed), a consensus sign is
//! elected per scalar from the sum across subjects, and only values agreeing
//! with it are averaged. Experts, router, CLS pathway and heads of the
//! upcycled model are freshly initialized.

use serde::{Deserialize, Serialize};

use crate::error::{MobreError, Result};
use crate::model::{init_model, ModelConfig};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::REGION_EMB;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimScope {
    /// One magnitude ranking over every scalar of the set.
    Global,
    PerTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionEmbMode {
    Merge,
    Reinit,
    /// Merge when every subject covers the same regions, else reinitialize.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    pub trim_fraction: f64,
    pub trim_scope: TrimScope,
    pub region_emb: RegionEmbMode,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            trim_fraction: 0.5,
            trim_scope: TrimScope::Global,
            region_emb: RegionEmbMode::Auto,
        }
    }
}

/// Tensors carried over from the pretrained dense models (region embedding
/// excluded; it is governed by [`RegionEmbMode`]).
pub fn is_shared(name: &str) -> bool {
    if name == REGION_EMB {
        return false;
    }
    if name.starts_with("tokenizer.") || name.starts_with("final_norm.") {
        return true;
    }
    match name.strip_prefix("blocks.") {
        Some(rest) => {
            let part = rest.split_once('.').map(|(_, p)| p).unwrap_or("");
            part.starts_with("norm1.") || part.starts_with("norm2.") || part.starts_with("attn.")
        }
        None => false,
    }
}

fn abs_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64c().abs()
}

/// Zeroes the `floor(fraction · n)` smallest-magnitude scalars. Ties are
/// pruned in canonical order: tensor name, then flat index.
pub fn trim<T: Scalar>(set: &ModelParams<T>, fraction: f64, scope: TrimScope) -> Result<ModelParams<T>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(MobreError::Config(format!("trim fraction {fraction} outside [0, 1)")));
    }
    let mut out = set.clone();
    match scope {
        TrimScope::Global => {
            let mut order: Vec<(f64, usize, usize)> = Vec::with_capacity(set.num_scalars());
            for (ti, (_, t)) in set.iter().enumerate() {
                order.extend(t.data().iter().enumerate().map(|(i, &v)| (abs_f64(v), ti, i)));
            }
            let k = (fraction * order.len() as f64).floor() as usize;
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut tensors: Vec<&mut Tensor<T>> = out.iter_mut().map(|(_, t)| t).collect();
            for &(_, ti, i) in &order[..k] {
                tensors[ti].data_mut()[i] = T::zero();
            }
        }
        TrimScope::PerTensor => {
            for (_, t) in out.iter_mut() {
                let mut order: Vec<(f64, usize)> = t.data().iter().enumerate().map(|(i, &v)| (abs_f64(v), i)).collect();
                let k = (fraction * order.len() as f64).floor() as usize;
                order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, i) in &order[..k] {
                    t.data_mut()[i] = T::zero();
                }
            }
        }
    }
    Ok(out)
}

/// Consensus-sign mean of one scalar across subjects. Sums run over the
/// values in ascending order, so the result does not depend on subject order.
pub fn merge_scalar(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    let gamma = if sum > 0.0 {
        1.0
    } else if sum < 0.0 {
        -1.0
    } else {
        return 0.0;
    };
    let agree: Vec<f64> = sorted.into_iter().filter(|&v| v * gamma > 0.0).collect();
    if agree.iter().all(|&v| v == agree[0]) {
        return agree[0];
    }
    agree.iter().sum::<f64>() / agree.len() as f64
}

pub fn merge<T: Scalar>(sets: &[ModelParams<T>]) -> Result<ModelParams<T>> {
    let first = sets.first().ok_or_else(|| MobreError::Invalid("merge needs at least one parameter set".into()))?;
    for s in &sets[1..] {
        let missing: Vec<String> = first
            .names()
            .filter(|n| !s.contains(n))
            .chain(s.names().filter(|n| !first.contains(n)))
            .map(String::from)
            .collect();
        if !missing.is_empty() {
            return Err(MobreError::MissingParams(missing));
        }
        for (name, t) in s.iter() {
            let f = first.get(name).unwrap();
            if f.shape() != t.shape() {
                return Err(MobreError::ShapeMismatch {
                    name: name.to_string(),
                    expected: f.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
    }
    let mut out = ModelParams::new();
    let mut column = vec![0.0; sets.len()];
    for (name, t) in first.iter() {
        let parts: Vec<&Tensor<T>> = sets.iter().map(|s| s.get(name).unwrap()).collect();
        let data = (0..t.len())
            .map(|i| {
                for (c, p) in column.iter_mut().zip(&parts) {
                    *c = p.data()[i].to_f64c();
                }
                T::from_f64c(merge_scalar(&column))
            })
            .collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data));
    }
    Ok(out)
}

/// Shared subset of every subject model, trimmed and merged.
/// `region_sets[i]` lists the regions subject `i` covers.
pub fn merge_models<T: Scalar>(
    subjects: &[ModelParams<T>],
    region_sets: &[Vec<usize>],
    cfg: &MergeConfig,
) -> Result<ModelParams<T>> {
    let include_region = match cfg.region_emb {
        RegionEmbMode::Merge => true,
        RegionEmbMode::Reinit => false,
        RegionEmbMode::Auto => region_sets.windows(2).all(|w| w[0] == w[1]),
    };
    let trimmed = subjects
        .iter()
        .map(|p| {
            let shared = p.filtered(|n| is_shared(n) || (include_region && n == REGION_EMB));
            trim(&shared, cfg.trim_fraction, cfg.trim_scope)
        })
        .collect::<Result<Vec<_>>>()?;
    merge(&trimmed)
}

/// Full model whose shared tensors come from `merged`; everything else is
/// initialized from `seed`.
pub fn upcycle_init<T: Scalar>(merged: &ModelParams<T>, cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut out = init_model::<T>(cfg, seed)?;
    let missing: Vec<String> = out
        .names()
        .filter(|n| is_shared(n) && !merged.contains(n))
        .map(String::from)
        .collect();
    if !missing.is_empty() {
        return Err(MobreError::MissingParams(missing));
    }
    for (name, t) in merged.iter() {
        let slot = out
            .get(name)
            .ok_or_else(|| MobreError::Invalid(format!("merged tensor {name} has no slot in the model")))?;
        if slot.shape() != t.shape() {
            return Err(MobreError::ShapeMismatch {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        out.insert(name, t.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[f64]) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::from_f64(&[values.len()], values));
        p
    }

    #[test]
    fn trim_examples() {
        let t = trim(&set(&[3.0, -1.0, 0.5, -2.0]), 0.5, TrimScope::Global).unwrap();
        assert_eq!(t.get("w").unwrap().data(), &[3.0, 0.0, 0.0, -2.0]);
        let t = trim(&set(&[1.0, 1.0, 1.0, 1.0]), 0.5, TrimScope::Global).unwrap();
        assert_eq!(t.get("w").unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        let s = set(&[0.1, -0.2]);
        assert!(trim(&s, 0.0, TrimScope::Global).unwrap().bit_eq(&s));
        assert!(trim(&s, 1.0, TrimScope::Global).is_err());
    }

    #[test]
    fn trim_ties_follow_name_order_across_tensors() {
        let mut p = ModelParams::<f64>::new();
        p.insert("b", Tensor::from_f64(&[2], &[1.0, 1.0]));
        p.insert("a", Tensor::from_f64(&[2], &[1.0, 1.0]));
        let t = trim(&p, 0.5, TrimScope::Global).unwrap();
        assert_eq!(t.get("a").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(t.get("b").unwrap().data(), &[1.0, 1.0]);
        let t = trim(&p, 0.5, TrimScope::PerTensor).unwrap();
        assert_eq!(t.get("a").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn merge_examples() {
        assert!((merge_scalar(&[0.5, 0.4, -0.3]) - 0.45).abs() < 1e-15);
        assert_eq!(merge_scalar(&[0.3, -0.3]), 0.0);
        let s = set(&[0.7, -1.5, 0.0, 2.0]);
        let m = merge(&[s.clone(), s.clone(), s.clone()]).unwrap();
        assert!(m.bit_eq(&s));
    }

    #[test]
    fn merge_rejects_mismatched_shapes() {
        let mut b = ModelParams::new();
        b.insert("w", Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]));
        match merge(&[set(&[1.0, 2.0]), b]) {
            Err(MobreError::ShapeMismatch { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shared_predicate() {
        for n in ["tokenizer.conv0.weight", "tokenizer.temporal_emb", "blocks.3.attn.q.weight", "blocks.0.norm2.scale", "final_norm.offset"] {
            assert!(is_shared(n), "{n}");
        }
        for n in [REGION_EMB, "blocks.0.ffn.fc1.weight", "blocks.1.router.weight", "blocks.0.experts.03.fc1.bias", "blocks.0.cls_ffn.fc2.bias", "cls.tokens", "heads.0.weight", "rmae.mask_token"] {
            assert!(!is_shared(n), "{n}");
        }
    }
}
