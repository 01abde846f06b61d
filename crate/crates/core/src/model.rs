//! Full decoder: tokenizer, CLS bank, block stack, task heads.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{self, cls_rows, decode_task};
use crate::autodiff::{AttentionMask, Gradients, Graph, Var};
use crate::error::{MobreError, Result};
use crate::moe::{self, init_block, init_norm, RouterDecision, SequenceLayout};
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{self, add_embeddings, conv_tokens, ChannelInput, TokenizerConfig};

/// Lazily binds named parameters into a graph, once per name.
pub struct Binder<'a, T: Scalar> {
    params: &'a ModelParams<T>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Binder {
            params,
            bound: HashMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph<'a, T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.req(name)?;
        let v = g.param(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn params(&self) -> &'a ModelParams<T> {
        self.params
    }

    /// Gradients of every bound parameter that the root depends on.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| grads.get(v).map(|t| (n.clone(), t.clone())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalFfn {
    Dense,
    Moe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// One `J·d` token per task, split into `J` sub-tokens.
    TaskDisentangled,
    /// A single width-`d` token read by every head.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub d_model: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub local_ffn: LocalFfn,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_regions: usize,
    pub max_patches: usize,
    pub task_classes: Vec<usize>,
    pub cls_mode: ClsMode,
    /// `J`, the CLS width multiplier.
    pub cls_width: usize,
    /// Hidden width of the masked-reconstruction heads.
    pub pred_head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            tokenizer: TokenizerConfig::default(),
            d_model: 64,
            num_blocks: 4,
            num_heads: 8,
            mlp_hidden: 128,
            local_ffn: LocalFfn::Moe,
            num_experts: 21,
            top_k: 2,
            num_regions: 4,
            max_patches: 16,
            task_classes: vec![23, 11, 4],
            cls_mode: ClsMode::TaskDisentangled,
            cls_width: 4,
            pred_head_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn num_tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate(self.d_model)?;
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(MobreError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.num_blocks == 0 || self.mlp_hidden == 0 || self.num_regions == 0 || self.max_patches == 0 {
            return Err(MobreError::Config("block count, mlp width, regions and patches must be positive".into()));
        }
        if self.local_ffn == LocalFfn::Moe && (self.top_k == 0 || self.top_k > self.num_experts) {
            return Err(MobreError::TopKExceedsExperts {
                top_k: self.top_k,
                experts: self.num_experts,
            });
        }
        if self.task_classes.is_empty() || self.task_classes.iter().any(|&k| k < 2) {
            return Err(MobreError::Config("every task needs at least two classes".into()));
        }
        if self.cls_width == 0 {
            return Err(MobreError::Config("cls_width must be positive".into()));
        }
        Ok(())
    }

    /// Same architecture with the mixture replaced by one dense FFN.
    pub fn dense(&self) -> ModelConfig {
        ModelConfig {
            local_ffn: LocalFfn::Dense,
            ..self.clone()
        }
    }
}

pub const FINAL_NORM: &str = "final_norm";

/// Fresh parameters for the full classifier.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ModelParams::new();
    tokenizer::init_params(&mut rng, &cfg.tokenizer, cfg.d_model, cfg.num_regions, cfg.max_patches, &mut out);
    for layer in 0..cfg.num_blocks {
        init_block(&mut rng, cfg, layer, &mut out);
    }
    init_norm(&mut out, FINAL_NORM, cfg.d_model);
    aggregation::init_params(&mut rng, cfg, &mut out);
    Ok(out)
}

/// Expected parameter names and shapes for `cfg`.
pub fn expected_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    let p: ModelParams<f32> = init_model(cfg, 0)?;
    Ok(p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect())
}

/// Checks that `params` carries exactly the tensors `cfg` calls for.
pub fn validate_params<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    let expected = expected_shapes(cfg)?;
    let missing: Vec<String> = expected.keys().filter(|n| !params.contains(n)).cloned().collect();
    if !missing.is_empty() {
        return Err(MobreError::MissingParams(missing));
    }
    for (name, t) in params.iter() {
        match expected.get(name) {
            None => return Err(MobreError::Invalid(format!("unexpected tensor {name}"))),
            Some(shape) if shape.as_slice() != t.shape() => {
                return Err(MobreError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Diagnostic mode: CLS and local tokens attend only within their group.
    pub block_diagonal: bool,
}

pub struct ForwardOutput {
    /// `[1 × K_j]` logits per task.
    pub logits: Vec<Var>,
    pub aux: Option<Var>,
    pub decisions: Vec<RouterDecision>,
    /// Router probabilities per MoE layer, aligned with `decisions`.
    pub router_probs: Vec<Var>,
    /// Final-layer sequence before the output norm.
    pub sequence: Var,
    pub layout: SequenceLayout,
}

pub fn block_diagonal_mask(layout: &SequenceLayout) -> AttentionMask {
    let s = layout.total_rows();
    let k = layout.cls_rows;
    let allowed = (0..s * s).map(|ij| (ij / s < k) == (ij % s < k)).collect();
    AttentionMask {
        allowed: Rc::new(allowed),
    }
}

pub fn forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &ModelConfig,
    input: &ChannelInput<T>,
    opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let (content, p) = conv_tokens(g, b, &cfg.tokenizer, input)?;
    let tokens = add_embeddings(g, b, content, p, &input.regions)?;
    let layout = SequenceLayout {
        cls_rows: cls_rows(cfg),
        num_patches: p,
        regions: input.regions.clone(),
        num_regions: cfg.num_regions,
    };
    let seq = aggregation::attach_cls(g, b, cfg, tokens)?;
    let mask = opts.block_diagonal.then(|| block_diagonal_mask(&layout));
    let stack = moe::stack_forward(g, b, cfg, seq, &layout, mask.as_ref())?;
    let rows: Vec<usize> = (0..layout.cls_rows).collect();
    let cls = g.gather_rows(stack.x, &rows);
    let cls = moe::norm(g, b, FINAL_NORM, cls)?;
    let logits = (0..cfg.num_tasks())
        .map(|task| decode_task(g, b, cfg, cls, task))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForwardOutput {
        logits,
        aux: stack.aux,
        decisions: stack.decisions,
        router_probs: stack.router_probs,
        sequence: stack.x,
        layout,
    })
}

/// Mean cross-entropy over the labeled tasks, plus `aux_weight` times the
/// balance term when the stack has one.
pub fn loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    out: &ForwardOutput,
    labels: &BTreeMap<usize, usize>,
    aux_weight: f64,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(MobreError::Invalid("no task labels for loss".into()));
    }
    let mut total: Option<Var> = None;
    for (&task, &class) in labels {
        let logits = *out.logits.get(task).ok_or(MobreError::UnknownTask(task))?;
        let k = g.shape(logits)[1];
        if class >= k {
            return Err(MobreError::Invalid(format!("label {class} out of range for task {task}")));
        }
        let ce = g.softmax_cross_entropy(logits, &[class]);
        total = Some(match total {
            None => ce,
            Some(t) => g.add(t, ce),
        });
    }
    let ce = g.scale(total.unwrap(), T::from_f64c(1.0 / labels.len() as f64));
    Ok(match out.aux {
        Some(aux) if aux_weight != 0.0 => {
            let a = g.scale(aux, T::from_f64c(aux_weight));
            g.add(ce, a)
        }
        _ => ce,
    })
}

/// Class prediction per task for one input.
pub fn predict<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, input: &ChannelInput<T>) -> Result<Prediction> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let out = forward(&mut g, &mut b, cfg, input, ForwardOptions::default())?;
    let mut classes = Vec::with_capacity(out.logits.len());
    for &l in &out.logits {
        let v = g.value(l);
        if !v.all_finite() {
            return Err(MobreError::NonFinite("task logits".into()));
        }
        classes.push(crate::moe::select_top_k(v.data(), 1)[0]);
    }
    Ok(Prediction {
        classes,
        decisions: out.decisions,
    })
}

pub struct Prediction {
    pub classes: Vec<usize>,
    pub decisions: Vec<RouterDecision>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                filters: vec![4, 8],
                kernels: vec![5, 3],
                strides: vec![2, 2],
            },
            d_model: 8,
            num_blocks: 2,
            num_heads: 2,
            mlp_hidden: 12,
            local_ffn: LocalFfn::Moe,
            num_experts: 3,
            top_k: 2,
            num_regions: 3,
            max_patches: 4,
            task_classes: vec![3, 2],
            cls_mode: ClsMode::TaskDisentangled,
            cls_width: 2,
            pred_head_hidden: 8,
        }
    }

    fn input(seed: u64, c: usize, t: usize) -> ChannelInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Tensor<f64> = normal(&mut rng, &[t * c], 1.0);
        ChannelInput::from_time_major(x.data(), t, c, (0..c).map(|i| i % 3).collect())
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let cfg = tiny();
        let params: ModelParams<f64> = init_model(&cfg, 1).unwrap();
        let x = input(2, 4, 17);
        let a = predict(&params, &cfg, &x).unwrap();
        let b = predict(&params, &cfg, &x).unwrap();
        assert_eq!(a.classes, b.classes);
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.decisions.len(), 2);
    }

    #[test]
    fn zero_output_projections_make_stack_identity() {
        let cfg = tiny();
        let mut params: ModelParams<f64> = init_model(&cfg, 4).unwrap();
        let zero: Vec<String> = params
            .names()
            .filter(|n| n.contains(".attn.o.") || n.contains(".fc2."))
            .map(String::from)
            .collect();
        for n in zero {
            let t = params.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(5, 4, 17);
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let (content, p) = conv_tokens(&mut g, &mut b, &cfg.tokenizer, &x).unwrap();
        let tokens = add_embeddings(&mut g, &mut b, content, p, &x.regions).unwrap();
        let seq = aggregation::attach_cls(&mut g, &mut b, &cfg, tokens).unwrap();
        let layout = SequenceLayout {
            cls_rows: cls_rows(&cfg),
            num_patches: p,
            regions: x.regions.clone(),
            num_regions: 3,
        };
        let out = moe::stack_forward(&mut g, &mut b, &cfg, seq, &layout, None).unwrap();
        assert_eq!(g.value(out.x).data(), g.value(seq).data());
    }

    #[test]
    fn validate_params_reports_missing_and_bad_shapes() {
        let cfg = tiny();
        let mut params: ModelParams<f64> = init_model(&cfg, 0).unwrap();
        validate_params(&cfg, &params).unwrap();
        params.insert("final_norm.scale", Tensor::zeros(&[9]));
        assert!(matches!(validate_params(&cfg, &params), Err(MobreError::ShapeMismatch { .. })));
        params.remove("final_norm.scale");
        match validate_params(&cfg, &params) {
            Err(MobreError::MissingParams(m)) => assert_eq!(m, vec!["final_norm.scale".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dense_variant_has_no_expert_tensors() {
        let cfg = tiny().dense();
        let params: ModelParams<f32> = init_model(&cfg, 0).unwrap();
        assert_eq!(params.count_matching(|n| n.contains("experts") || n.contains("router")), 0);
    }
}
