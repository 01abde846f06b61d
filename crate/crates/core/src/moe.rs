//! Brain-regional mixture-of-experts transformer blocks.
//!
//! Each block is pre-norm self-attention followed by a feed-forward stage in
//! which local tokens are dispatched channel by channel: the router sees the
//! sum of a channel's normalized hidden states over all its patches, so every
//! temporal token of that channel goes to the same top-k experts with the same
//! gate weights.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::aggregation::route_ffn;
use crate::autodiff::{AttentionMask, Graph, Var};
use crate::error::{MobreError, Result};
use crate::model::{Binder, LocalFfn, ModelConfig};
use crate::params::{uniform, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row bookkeeping for one sequence: `cls_rows` CLS sub-tokens come first,
/// then `num_patches · num_channels` local tokens ordered `p·C + c`.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub cls_rows: usize,
    pub num_patches: usize,
    pub regions: Vec<usize>,
    pub num_regions: usize,
}

impl SequenceLayout {
    pub fn num_channels(&self) -> usize {
        self.regions.len()
    }

    pub fn local_rows(&self) -> usize {
        self.num_patches * self.regions.len()
    }

    pub fn total_rows(&self) -> usize {
        self.cls_rows + self.local_rows()
    }

    /// Channel of local row `s` (0-based within the local block).
    pub fn channel_of_local(&self, s: usize) -> usize {
        s % self.regions.len()
    }
}

/// Expert assignment of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    pub num_channels: usize,
    pub num_experts: usize,
    pub num_regions: usize,
    /// Softmax router probabilities, `[C × N_x]`.
    pub probs: Vec<f64>,
    /// Renormalized top-k gates, `[C × N_x]`, zero outside the selection.
    pub gate: Vec<f64>,
    /// Selected experts per channel, highest probability first.
    pub selected: Vec<Vec<usize>>,
    /// Tokens dispatched per (region, expert), `[R × N_x]`.
    pub dispatch_counts: Vec<u64>,
}

impl RouterDecision {
    pub fn gate_row(&self, c: usize) -> &[f64] {
        &self.gate[c * self.num_experts..(c + 1) * self.num_experts]
    }

    /// Token-level load per expert, summed over regions.
    pub fn expert_load(&self) -> Vec<u64> {
        let mut load = vec![0; self.num_experts];
        for r in 0..self.num_regions {
            for (x, l) in load.iter_mut().enumerate() {
                *l += self.dispatch_counts[r * self.num_experts + x];
            }
        }
        load
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn select_top_k<T: PartialOrd + Copy>(row: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(row.len()));
    order
}

/// Switch-style balance term `N_x · Σ_x f_x · p_x`, with `f_x` the fraction of
/// channels whose top-1 expert is `x` and `p_x` the mean router probability.
pub fn load_balance_loss(probs: &[f64], num_channels: usize, num_experts: usize, top1: &[usize]) -> f64 {
    let cf = num_channels as f64;
    let mut f = vec![0.0; num_experts];
    for &x in top1 {
        f[x] += 1.0 / cf;
    }
    let mut p = vec![0.0; num_experts];
    for row in probs.chunks(num_experts) {
        for (pv, &v) in p.iter_mut().zip(row) {
            *pv += v / cf;
        }
    }
    num_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

pub fn block_prefix(layer: usize) -> String {
    format!("blocks.{layer}")
}

pub fn expert_prefix(layer: usize, expert: usize) -> String {
    format!("blocks.{layer}.experts.{expert:02}")
}

pub fn init_linear<T: Scalar>(rng: &mut ChaCha8Rng, out: &mut ModelParams<T>, prefix: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    out.insert(format!("{prefix}.weight"), uniform(rng, &[fan_in, fan_out], bound));
    out.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub fn init_ffn<T: Scalar>(rng: &mut ChaCha8Rng, out: &mut ModelParams<T>, prefix: &str, d: usize, hidden: usize) {
    init_linear(rng, out, &format!("{prefix}.fc1"), d, hidden);
    init_linear(rng, out, &format!("{prefix}.fc2"), hidden, d);
}

pub fn init_norm<T: Scalar>(out: &mut ModelParams<T>, prefix: &str, d: usize) {
    out.insert(format!("{prefix}.scale"), Tensor::filled(&[d], T::one()));
    out.insert(format!("{prefix}.offset"), Tensor::zeros(&[d]));
}

/// Attention, norms and the local feed-forward stage of one block. The CLS
/// pathway is added separately by the aggregation module.
pub fn init_block<T: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig, layer: usize, out: &mut ModelParams<T>) {
    let p = block_prefix(layer);
    let d = cfg.d_model;
    init_norm(out, &format!("{p}.norm1"), d);
    for proj in ["q", "k", "v", "o"] {
        init_linear(rng, out, &format!("{p}.attn.{proj}"), d, d);
    }
    init_norm(out, &format!("{p}.norm2"), d);
    match cfg.local_ffn {
        LocalFfn::Dense => init_ffn(rng, out, &format!("{p}.ffn"), d, cfg.mlp_hidden),
        LocalFfn::Moe => {
            let bound = 1.0 / (d as f64).sqrt();
            out.insert(format!("{p}.router.weight"), uniform(rng, &[d, cfg.num_experts], bound));
            for x in 0..cfg.num_experts {
                init_ffn(rng, out, &expert_prefix(layer, x), d, cfg.mlp_hidden);
            }
        }
    }
}

/// `fc2(gelu(fc1(x)))`
pub fn ffn<'a, T: Scalar>(g: &mut Graph<'a, T>, b: &mut Binder<'a, T>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = b.get(g, &format!("{prefix}.fc1.weight"))?;
    let b1 = b.get(g, &format!("{prefix}.fc1.bias"))?;
    let w2 = b.get(g, &format!("{prefix}.fc2.weight"))?;
    let b2 = b.get(g, &format!("{prefix}.fc2.bias"))?;
    let h = g.linear(x, w1, b1);
    let h = g.gelu(h);
    Ok(g.linear(h, w2, b2))
}

pub fn norm<'a, T: Scalar>(g: &mut Graph<'a, T>, b: &mut Binder<'a, T>, prefix: &str, x: Var) -> Result<Var> {
    let s = b.get(g, &format!("{prefix}.scale"))?;
    let o = b.get(g, &format!("{prefix}.offset"))?;
    Ok(g.layer_norm(x, s, o))
}


/// Mixture output for the local tokens `hbar` (`[P·C × d]`).
pub struct MoeOutput {
    pub out: Var,
    pub aux: Var,
    /// Router probabilities, `[C × N_x]`.
    pub probs: Var,
    pub decision: RouterDecision,
}

pub fn moe_ffn<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    layer: usize,
    hbar: Var,
    layout: &SequenceLayout,
    num_experts: usize,
    top_k: usize,
) -> Result<MoeOutput> {
    if top_k > num_experts || top_k == 0 {
        return Err(MobreError::TopKExceedsExperts {
            top_k,
            experts: num_experts,
        });
    }
    let c = layout.num_channels();
    let s = layout.local_rows();
    let p = layout.num_patches;
    let nx = num_experts;

    // Channel-wise router input: sum of the channel's normalized hiddens.
    let mut sel = Tensor::<T>::zeros(&[c, s]);
    for row in 0..s {
        sel.data_mut()[layout.channel_of_local(row) * s + row] = T::one();
    }
    let sel = g.constant(sel);
    let summed = g.matmul(sel, hbar);
    let phi = b.get(g, &format!("{}.router.weight", block_prefix(layer)))?;
    let logits = g.matmul(summed, phi);
    if !g.value(logits).all_finite() {
        return Err(MobreError::NonFinite(format!("router logits in block {layer}")));
    }
    let probs = g.softmax_rows(logits);

    let pv: Vec<f64> = g.value(probs).data().iter().map(|v| v.to_f64c()).collect();
    let selected: Vec<Vec<usize>> = g
        .value(probs)
        .data()
        .chunks(nx)
        .map(|row| select_top_k(row, top_k))
        .collect();
    let mut keep = Tensor::<T>::zeros(&[c, nx]);
    for (ch, xs) in selected.iter().enumerate() {
        for &x in xs {
            keep.data_mut()[ch * nx + x] = T::one();
        }
    }
    let keep = g.constant(keep);
    let kept = g.mul(probs, keep);
    let gates = g.normalize_rows(kept);

    let cf = c as f64;
    let mut frac = vec![0.0; nx];
    for xs in &selected {
        frac[xs[0]] += 1.0 / cf;
    }
    let row: Vec<T> = frac.iter().map(|f| T::from_f64c(nx as f64 * f / cf)).collect();
    let weight = g.constant(Tensor::new(vec![c, nx], row.repeat(c)));
    let weighted = g.mul(probs, weight);
    let aux = g.sum_all(weighted);

    let mut out: Option<Var> = None;
    for x in 0..nx {
        let rows: Vec<usize> = (0..s)
            .filter(|&row| selected[layout.channel_of_local(row)].contains(&x))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let xin = g.gather_rows(hbar, &rows);
        let y = ffn(g, b, &expert_prefix(layer, x), xin)?;
        let gidx: Vec<usize> = rows.iter().map(|&row| layout.channel_of_local(row) * nx + x).collect();
        let n = gidx.len();
        let gv = g.gather(gates, Rc::new(gidx), &[n]);
        let y = g.mul_col(y, gv);
        let contrib = g.scatter_add_rows(y, Rc::new(rows), s);
        out = Some(match out {
            None => contrib,
            Some(acc) => g.add(acc, contrib),
        });
    }
    let out = out.expect("top_k >= 1 selects at least one expert");

    let gate: Vec<f64> = g.value(gates).data().iter().map(|v| v.to_f64c()).collect();
    let mut dispatch = vec![0u64; layout.num_regions * nx];
    for (ch, xs) in selected.iter().enumerate() {
        let r = layout.regions[ch];
        for &x in xs {
            dispatch[r * nx + x] += p as u64;
        }
    }
    Ok(MoeOutput {
        out,
        aux,
        probs,
        decision: RouterDecision {
            num_channels: c,
            num_experts: nx,
            num_regions: layout.num_regions,
            probs: pv,
            gate,
            selected,
            dispatch_counts: dispatch,
        },
    })
}

pub struct BlockOutput {
    pub y: Var,
    pub decision: Option<RouterDecision>,
    pub aux: Option<Var>,
    pub probs: Option<Var>,
}

/// One pre-norm block over the whole sequence (CLS rows first, then locals).
pub fn block_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &ModelConfig,
    layer: usize,
    x: Var,
    layout: &SequenceLayout,
    mask: Option<&AttentionMask>,
) -> Result<BlockOutput> {
    let rows = g.shape(x)[0];
    if rows != layout.total_rows() {
        return Err(MobreError::ShapeMismatch {
            name: format!("block {layer} input"),
            expected: vec![layout.total_rows(), cfg.d_model],
            got: g.shape(x).to_vec(),
        });
    }
    let p = block_prefix(layer);
    let a = norm(g, b, &format!("{p}.norm1"), x)?;
    let mut proj = |g: &mut Graph<'a, T>, name: &str, v: Var| -> Result<Var> {
        let w = b.get(g, &format!("{p}.attn.{name}.weight"))?;
        let bias = b.get(g, &format!("{p}.attn.{name}.bias"))?;
        Ok(g.linear(v, w, bias))
    };
    let q = proj(g, "q", a)?;
    let k = proj(g, "k", a)?;
    let v = proj(g, "v", a)?;
    let att = g.attention(q, k, v, cfg.num_heads, mask);
    let o = proj(g, "o", att)?;
    let h = g.add(x, o);
    let hbar = norm(g, b, &format!("{p}.norm2"), h)?;
    let routed = route_ffn(g, b, cfg, layer, hbar, layout)?;
    let y = g.add(h, routed.out);
    Ok(BlockOutput {
        y,
        decision: routed.decision,
        aux: routed.aux,
        probs: routed.probs,
    })
}

pub struct StackOutput {
    pub x: Var,
    pub decisions: Vec<RouterDecision>,
    /// Mean balance loss over MoE layers; `None` for dense stacks.
    pub aux: Option<Var>,
    /// Router probabilities per MoE layer, aligned with `decisions`.
    pub router_probs: Vec<Var>,
}

pub fn stack_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &ModelConfig,
    x: Var,
    layout: &SequenceLayout,
    mask: Option<&AttentionMask>,
) -> Result<StackOutput> {
    let mut x = x;
    let mut decisions = Vec::new();
    let mut aux_terms = Vec::new();
    let mut router_probs = Vec::new();
    for layer in 0..cfg.num_blocks {
        let out = block_forward(g, b, cfg, layer, x, layout, mask)?;
        x = out.y;
        decisions.extend(out.decision);
        aux_terms.extend(out.aux);
        router_probs.extend(out.probs);
    }
    let aux = if aux_terms.is_empty() {
        None
    } else {
        let mut acc = aux_terms[0];
        for &t in &aux_terms[1..] {
            acc = g.add(acc, t);
        }
        Some(g.scale(acc, T::from_f64c(1.0 / aux_terms.len() as f64)))
    };
    Ok(StackOutput {
        x,
        decisions,
        aux,
        router_probs,
    })
}

/// Balance loss pooled over a batch: per layer, `f_x` and `p_x` are taken over
/// every channel of every sample, then layers are averaged. For a single
/// sample this equals the per-forward term.
pub fn batch_balance_loss<'a, T: Scalar>(g: &mut Graph<'a, T>, samples: &[(&[Var], &[RouterDecision])]) -> Option<Var> {
    let layers = samples.first()?.1.len();
    if layers == 0 {
        return None;
    }
    let mut per_layer = Vec::with_capacity(layers);
    for l in 0..layers {
        let nx = samples[0].1[l].num_experts;
        let total: usize = samples.iter().map(|s| s.1[l].num_channels).sum();
        let ct = total as f64;
        let mut frac = vec![0.0; nx];
        for s in samples {
            for xs in &s.1[l].selected {
                frac[xs[0]] += 1.0 / ct;
            }
        }
        let mut acc: Option<Var> = None;
        for s in samples {
            let c = s.1[l].num_channels;
            let row: Vec<T> = frac.iter().map(|f| T::from_f64c(nx as f64 * f / ct)).collect();
            let weight = g.constant(Tensor::new(vec![c, nx], row.repeat(c)));
            let weighted = g.mul(s.0[l], weight);
            let term = g.sum_all(weighted);
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        per_layer.push(acc?);
    }
    let mut acc = per_layer[0];
    for &t in &per_layer[1..] {
        acc = g.add(acc, t);
    }
    Some(g.scale(acc, T::from_f64c(1.0 / layers as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClsMode, ModelConfig};
    use crate::tokenizer::TokenizerConfig;
    use rand::{Rng, SeedableRng};

    /// Independent softmax + top-k + renormalization on one logit row.
    fn oracle_gates(logits: &[f64], k: usize) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        let mut chosen = vec![false; p.len()];
        for _ in 0..k {
            let mut best = None;
            for (i, &v) in p.iter().enumerate() {
                if chosen[i] {
                    continue;
                }
                match best {
                    Some((_, bv)) if bv >= v => {}
                    _ => best = Some((i, v)),
                }
            }
            chosen[best.unwrap().0] = true;
        }
        let s: f64 = p.iter().zip(&chosen).filter(|(_, &c)| c).map(|(v, _)| v).sum();
        p.iter().zip(&chosen).map(|(&v, &c)| if c { v / s } else { 0.0 }).collect()
    }

    fn cfg(nx: usize, top_k: usize) -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                filters: vec![4, 8],
                kernels: vec![5, 3],
                strides: vec![2, 2],
            },
            d_model: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_hidden: 16,
            local_ffn: LocalFfn::Moe,
            num_experts: nx,
            top_k,
            num_regions: 2,
            max_patches: 4,
            task_classes: vec![2],
            cls_mode: ClsMode::TaskDisentangled,
            cls_width: 1,
            pred_head_hidden: 8,
        }
    }

    fn layout(c: usize, p: usize) -> SequenceLayout {
        SequenceLayout {
            cls_rows: 0,
            num_patches: p,
            regions: (0..c).map(|i| i % 2).collect(),
            num_regions: 2,
        }
    }

    #[test]
    fn gates_match_bruteforce_softmax_topk() {
        // C = 3 channels, one patch, hand-set router logits via identity-like Φ.
        let c = cfg(4, 2);
        let mut params = ModelParams::<f64>::new();
        let mut phi = Tensor::zeros(&[8, 4]);
        for i in 0..4 {
            phi.data_mut()[i * 4 + i] = 1.0;
        }
        params.insert("blocks.0.router.weight", phi);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for x in 0..4 {
            init_ffn(&mut rng, &mut params, &expert_prefix(0, x), 8, 16);
        }
        let logits = [[0.3, -1.2, 2.0, 0.1], [1.0, 1.0, 0.5, -0.5], [-2.0, 0.0, 0.0, 3.0]];
        let mut h = Tensor::<f64>::zeros(&[3, 8]);
        for (ch, row) in logits.iter().enumerate() {
            h.data_mut()[ch * 8..ch * 8 + 4].copy_from_slice(row);
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let hv = g.constant(h);
        let out = moe_ffn(&mut g, &mut b, 0, hv, &layout(3, 1), c.num_experts, c.top_k).unwrap();
        for (ch, row) in logits.iter().enumerate() {
            let expect = oracle_gates(row, 2);
            for (a, e) in out.decision.gate_row(ch).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "channel {ch}: {a} vs {e}");
            }
        }
        // Equal logits on channel 1: lower index wins the tie.
        assert_eq!(out.decision.selected[1], vec![0, 1]);
    }

    #[test]
    fn balanced_uniform_routing_gives_unit_aux() {
        let nx = 4;
        let probs = vec![0.25; 8 * nx];
        let top1: Vec<usize> = (0..8).map(|c| c % nx).collect();
        let v = load_balance_loss(&probs, 8, nx, &top1);
        assert!((v - 1.0).abs() < 1e-15);
        // Collapsed routing with peaked probabilities is penalized.
        let mut peaked = vec![0.0; 8 * nx];
        for c in 0..8 {
            peaked[c * nx] = 1.0;
        }
        assert!((load_balance_loss(&peaked, 8, nx, &[0; 8]) - nx as f64).abs() < 1e-12);
    }

    #[test]
    fn single_expert_gate_is_all_ones() {
        let c = cfg(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::<f64>::new();
        init_block(&mut rng, &c, 0, &mut params);
        let h = crate::params::normal(&mut rng, &[6, 8], 1.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let hv = g.constant(h);
        let out = moe_ffn(&mut g, &mut b, 0, hv, &layout(3, 2), 1, 1).unwrap();
        assert!(out.decision.gate.iter().all(|&v| v == 1.0));
        // Dense equivalent: the lone expert applied to every row.
        let dense = ffn(&mut g, &mut b, &expert_prefix(0, 0), hv).unwrap();
        assert_eq!(g.value(out.out).data(), g.value(dense).data());
    }

    #[test]
    fn tied_experts_make_routing_irrelevant() {
        let c = cfg(4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::<f64>::new();
        init_block(&mut rng, &c, 0, &mut params);
        let names: Vec<String> = params.names().filter(|n| n.contains("experts.00")).map(String::from).collect();
        for n in names {
            let t = params.get(&n).unwrap().clone();
            for x in 1..4 {
                params.insert(n.replace("experts.00", &format!("experts.{x:02}")), t.clone());
            }
        }
        let h = crate::params::normal(&mut rng, &[6, 8], 1.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let hv = g.constant(h);
        let out = moe_ffn(&mut g, &mut b, 0, hv, &layout(3, 2), 4, 2).unwrap();
        let dense = ffn(&mut g, &mut b, &expert_prefix(0, 0), hv).unwrap();
        for (a, e) in g.value(out.out).data().iter().zip(g.value(dense).data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_top_k_above_experts_and_nan_logits() {
        let c = cfg(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ModelParams::<f64>::new();
        init_block(&mut rng, &c, 0, &mut params);
        let mut h = crate::params::normal(&mut rng, &[2, 8], 1.0);
        {
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let hv = g.constant(h.clone());
            assert!(matches!(
                moe_ffn(&mut g, &mut b, 0, hv, &layout(2, 1), 2, 3),
                Err(MobreError::TopKExceedsExperts { .. })
            ));
        }
        h.data_mut()[3] = f64::NAN;
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let hv = g.constant(h);
        assert!(matches!(
            moe_ffn(&mut g, &mut b, 0, hv, &layout(2, 1), 2, 2),
            Err(MobreError::NonFinite(_))
        ));
    }

    #[test]
    fn dispatch_counts_recount_from_gates() {
        let c = cfg(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ModelParams::<f64>::new();
        init_block(&mut rng, &c, 0, &mut params);
        let p = 3;
        let h = Tensor::new(vec![p * 4, 8], (0..p * 4 * 8).map(|_| rng.random_range(-2.0..2.0)).collect());
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let hv = g.constant(h);
        let lay = layout(4, p);
        let d = moe_ffn(&mut g, &mut b, 0, hv, &lay, 5, 2).unwrap().decision;
        let mut recount = vec![0u64; 2 * 5];
        for ch in 0..4 {
            for x in 0..5 {
                if d.gate_row(ch)[x] > 0.0 {
                    recount[lay.regions[ch] * 5 + x] += p as u64;
                }
            }
        }
        assert_eq!(recount, d.dispatch_counts);
    }
}
