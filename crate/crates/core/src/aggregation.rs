//! Task-disentangled CLS tokens and task heads.
//!
//! Each task owns a CLS vector of width `J·d`, split into `J` sub-tokens that
//! are prepended to the local tokens (task 0 first). Inside every block the
//! CLS rows skip the router and go through one FFN shared by all CLS tokens.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MobreError, Result};
use crate::model::{Binder, ClsMode, LocalFfn, ModelConfig};
use crate::moe::{block_prefix, ffn, init_ffn, moe_ffn, RouterDecision, SequenceLayout};
use crate::params::{normal, uniform, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLS_TOKENS: &str = "cls.tokens";

pub fn head_prefix(task: usize) -> String {
    format!("heads.{task}")
}

pub fn cls_ffn_prefix(layer: usize) -> String {
    format!("{}.cls_ffn", block_prefix(layer))
}

/// Number of CLS rows in the sequence.
pub fn cls_rows(cfg: &ModelConfig) -> usize {
    match cfg.cls_mode {
        ClsMode::TaskDisentangled => cfg.num_tasks() * cfg.cls_width,
        ClsMode::Shared => 1,
    }
}

/// Width of the vector a task head reads.
pub fn head_width(cfg: &ModelConfig) -> usize {
    match cfg.cls_mode {
        ClsMode::TaskDisentangled => cfg.cls_width * cfg.d_model,
        ClsMode::Shared => cfg.d_model,
    }
}

/// CLS bank, per-block CLS FFNs and task heads.
pub fn init_params<T: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig, out: &mut ModelParams<T>) {
    for layer in 0..cfg.num_blocks {
        init_ffn(rng, out, &cls_ffn_prefix(layer), cfg.d_model, cfg.mlp_hidden);
    }
    let shape = match cfg.cls_mode {
        ClsMode::TaskDisentangled => [cfg.num_tasks(), cfg.cls_width * cfg.d_model],
        ClsMode::Shared => [1, cfg.d_model],
    };
    out.insert(CLS_TOKENS, normal(rng, &shape, 0.02));
    let w = head_width(cfg);
    for (task, &k) in cfg.task_classes.iter().enumerate() {
        let p = head_prefix(task);
        out.insert(format!("{p}.weight"), uniform(rng, &[w, k], 1.0 / (w as f64).sqrt()));
        out.insert(format!("{p}.bias"), Tensor::zeros(&[k]));
    }
}

/// Prepends the CLS sub-tokens to `local` (`[P·C × d]`).
pub fn attach_cls<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &ModelConfig,
    local: Var,
) -> Result<Var> {
    let bank = b.get(g, CLS_TOKENS)?;
    let rows = cls_rows(cfg);
    let split = g.reshape(bank, &[rows, cfg.d_model]);
    Ok(g.concat_rows(&[split, local]))
}

/// Splits a sequence back into its CLS rows and local rows.
pub fn detach_cls<T: Scalar>(g: &mut Graph<'_, T>, seq: Var, cls_rows: usize) -> (Var, Var) {
    let total = g.shape(seq)[0];
    let cls: Vec<usize> = (0..cls_rows).collect();
    let local: Vec<usize> = (cls_rows..total).collect();
    (g.gather_rows(seq, &cls), g.gather_rows(seq, &local))
}

pub struct RoutedFfn {
    pub out: Var,
    pub decision: Option<RouterDecision>,
    pub aux: Option<Var>,
    pub probs: Option<Var>,
}

/// Feed-forward stage of one block: CLS rows through the shared CLS FFN,
/// local rows through the mixture (or the dense FFN).
pub fn route_ffn<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &ModelConfig,
    layer: usize,
    hbar: Var,
    layout: &SequenceLayout,
) -> Result<RoutedFfn> {
    let rows = g.shape(hbar)[0];
    if rows != layout.total_rows() {
        return Err(MobreError::Invalid(format!(
            "block {layer}: sequence has {rows} rows, layout expects {} CLS + {} local",
            layout.cls_rows,
            layout.local_rows()
        )));
    }
    let (cls_in, local_in) = detach_cls(g, hbar, layout.cls_rows);
    let mut parts = Vec::with_capacity(2);
    if layout.cls_rows > 0 {
        parts.push(ffn(g, b, &cls_ffn_prefix(layer), cls_in)?);
    }
    let mut decision = None;
    let mut aux = None;
    let mut probs = None;
    if layout.local_rows() > 0 {
        let local = match cfg.local_ffn {
            LocalFfn::Dense => ffn(g, b, &format!("{}.ffn", block_prefix(layer)), local_in)?,
            LocalFfn::Moe => {
                let m = moe_ffn(g, b, layer, local_in, layout, cfg.num_experts, cfg.top_k)?;
                decision = Some(m.decision);
                aux = Some(m.aux);
                probs = Some(m.probs);
                m.out
            }
        };
        parts.push(local);
    }
    let out = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    Ok(RoutedFfn {
        out,
        decision,
        aux,
        probs,
    })
}

/// Logits `[1 × K_task]` from the final (normalized) CLS rows.
pub fn decode_task<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &ModelConfig,
    cls: Var,
    task: usize,
) -> Result<Var> {
    if task >= cfg.num_tasks() {
        return Err(MobreError::UnknownTask(task));
    }
    let rows: Vec<usize> = match cfg.cls_mode {
        ClsMode::TaskDisentangled => (task * cfg.cls_width..(task + 1) * cfg.cls_width).collect(),
        ClsMode::Shared => vec![0],
    };
    let picked = g.gather_rows(cls, &rows);
    let wide = g.reshape(picked, &[1, head_width(cfg)]);
    let p = head_prefix(task);
    let w = b.get(g, &format!("{p}.weight"))?;
    let bias = b.get(g, &format!("{p}.bias"))?;
    Ok(g.linear(wide, w, bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::moe::stack_forward;
    use crate::tokenizer::TokenizerConfig;
    use rand::SeedableRng;

    fn cfg(n: usize, j: usize) -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                filters: vec![8],
                kernels: vec![3],
                strides: vec![2],
            },
            d_model: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_hidden: 12,
            local_ffn: LocalFfn::Moe,
            num_experts: 3,
            top_k: 2,
            num_regions: 2,
            max_patches: 4,
            task_classes: vec![2; n],
            cls_mode: ClsMode::TaskDisentangled,
            cls_width: j,
            pred_head_hidden: 8,
        }
    }

    #[test]
    fn attach_lengths() {
        for (n, j, pc, want) in [(1, 1, 10, 11), (3, 4, 10, 22)] {
            let c = cfg(n, j);
            let params: ModelParams<f64> = init_model(&c, 0).unwrap();
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let local = g.constant(Tensor::zeros(&[pc, 8]));
            let seq = attach_cls(&mut g, &mut b, &c, local).unwrap();
            assert_eq!(g.shape(seq), &[want, 8]);
        }
    }

    #[test]
    fn detach_inverts_attach() {
        let c = cfg(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params: ModelParams<f64> = init_model(&c, 0).unwrap();
        let bank: Tensor<f64> = normal(&mut rng, &[3, 32], 1.0);
        params.insert(CLS_TOKENS, bank.clone());
        let x: Tensor<f64> = normal(&mut rng, &[10, 8], 1.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let local = g.constant(x.clone());
        let seq = attach_cls(&mut g, &mut b, &c, local).unwrap();
        let (cls, back) = detach_cls(&mut g, seq, 12);
        assert_eq!(g.value(back).data(), x.data());
        // Sub-token i of task t is columns i·d..(i+1)·d of bank row t.
        for t in 0..3 {
            for i in 0..4 {
                assert_eq!(g.value(cls).row(t * 4 + i), &bank.row(t)[i * 8..(i + 1) * 8]);
            }
        }
    }

    #[test]
    fn empty_local_sequence_never_routes() {
        let c = cfg(2, 2);
        let params: ModelParams<f64> = init_model(&c, 3).unwrap();
        let layout = SequenceLayout {
            cls_rows: 4,
            num_patches: 0,
            regions: vec![0, 1],
            num_regions: 2,
        };
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let local = g.constant(Tensor::zeros(&[0, 8]));
        let seq = attach_cls(&mut g, &mut b, &c, local).unwrap();
        let out = stack_forward(&mut g, &mut b, &c, seq, &layout, None).unwrap();
        assert!(out.decisions.is_empty() && out.aux.is_none());
    }

    #[test]
    fn zero_cls_ffn_output_passes_cls_through() {
        let c = cfg(2, 2);
        let mut params: ModelParams<f64> = init_model(&c, 3).unwrap();
        for n in ["blocks.0.cls_ffn.fc2.weight", "blocks.0.cls_ffn.fc2.bias"] {
            params.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let layout = SequenceLayout {
            cls_rows: 4,
            num_patches: 1,
            regions: vec![0, 1],
            num_regions: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hbar: Tensor<f64> = normal(&mut rng, &[6, 8], 1.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let h = g.constant(hbar);
        let r = route_ffn(&mut g, &mut b, &c, 0, h, &layout).unwrap();
        let out = g.value(r.out);
        assert!(out.data()[..4 * 8].iter().all(|&v| v == 0.0));
        assert!(out.data()[4 * 8..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn provenance_mismatch_is_rejected() {
        let c = cfg(1, 1);
        let params: ModelParams<f64> = init_model(&c, 3).unwrap();
        let layout = SequenceLayout {
            cls_rows: 1,
            num_patches: 2,
            regions: vec![0, 1],
            num_regions: 2,
        };
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let h = g.constant(Tensor::zeros(&[4, 8]));
        assert!(matches!(route_ffn(&mut g, &mut b, &c, 0, h, &layout), Err(MobreError::Invalid(_))));
    }

    #[test]
    fn block_diagonal_locals_match_cls_free_run() {
        use crate::model::block_diagonal_mask;
        let c = cfg(2, 2);
        let params: ModelParams<f64> = init_model(&c, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = normal(&mut rng, &[6, 8], 1.0);
        let with = SequenceLayout {
            cls_rows: 4,
            num_patches: 3,
            regions: vec![0, 1],
            num_regions: 2,
        };
        let without = SequenceLayout { cls_rows: 0, ..with.clone() };
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let local = g.constant(x);
        let seq = attach_cls(&mut g, &mut b, &c, local).unwrap();
        let mask = block_diagonal_mask(&with);
        let a = stack_forward(&mut g, &mut b, &c, seq, &with, Some(&mask)).unwrap();
        let plain = stack_forward(&mut g, &mut b, &c, local, &without, None).unwrap();
        let a_local = &g.value(a.x).data()[4 * 8..];
        for (u, v) in a_local.iter().zip(g.value(plain.x).data()) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(a.decisions, plain.decisions);
    }

    #[test]
    fn head_matches_manual_affine() {
        let c = cfg(1, 1);
        let mut params: ModelParams<f64> = init_model(&c, 0).unwrap();
        let w: Vec<f64> = (0..16).map(|i| (i as f64 - 7.5) * 0.1).collect();
        params.insert("heads.0.weight", Tensor::from_f64(&[8, 2], &w));
        params.insert("heads.0.bias", Tensor::from_f64(&[2], &[0.3, -0.2]));
        let cls: Vec<f64> = (0..8).map(|i| 1.0 - 0.25 * i as f64).collect();
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let cv = g.constant(Tensor::from_f64(&[1, 8], &cls));
        let logits = decode_task(&mut g, &mut b, &c, cv, 0).unwrap();
        for k in 0..2 {
            let manual: f64 = (0..8).map(|i| cls[i] * w[i * 2 + k]).sum::<f64>() + [0.3, -0.2][k];
            assert!((g.value(logits).data()[k] - manual).abs() < 1e-12);
        }
        // Zero CLS with zero bias gives uniform logits.
        params.insert("heads.0.bias", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let cv = g.constant(Tensor::zeros(&[1, 8]));
        let logits = decode_task(&mut g, &mut b, &c, cv, 0).unwrap();
        assert_eq!(g.value(logits).data(), &[0.0, 0.0]);
        assert!(matches!(decode_task(&mut g, &mut b, &c, cv, 1), Err(MobreError::UnknownTask(1))));
    }

    #[test]
    fn task_loss_leaves_other_heads_untouched() {
        use crate::model::{forward, loss, ForwardOptions};
        use crate::tokenizer::ChannelInput;
        use std::collections::BTreeMap;
        let c = cfg(3, 2);
        let params: ModelParams<f64> = init_model(&c, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = normal(&mut rng, &[9 * 3], 1.0);
        let input = ChannelInput::from_time_major(x.data(), 9, 3, vec![0, 1, 0]);
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let out = forward(&mut g, &mut b, &c, &input, ForwardOptions::default()).unwrap();
        let l = loss(&mut g, &out, &BTreeMap::from([(1, 1)]), 0.0).unwrap();
        let grads = b.collect_grads(&g.backward(l));
        for t in [0, 2] {
            for part in ["weight", "bias"] {
                if let Some(gr) = grads.get(&format!("heads.{t}.{part}")) {
                    assert!(gr.data().iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(grads["heads.1.weight"].data().iter().any(|&v| v != 0.0));
        assert!(grads[CLS_TOKENS].data().iter().any(|&v| v != 0.0));
    }
}
