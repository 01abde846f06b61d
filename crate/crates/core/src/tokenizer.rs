//! Brain-regional-temporal tokenizer.
//!
//! Every channel is run independently through a cascade of valid strided 1-D
//! convolutions (GELU between stages). The final stage yields one
//! `d`-dimensional token per temporal patch; a learnable temporal embedding
//! (indexed by patch) and a learnable region embedding (indexed by the
//! channel's region) are added on top.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{MobreError, Result};
use crate::model::Binder;
use crate::params::{normal, uniform, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            filters: vec![8, 16, 16, 32, 64],
            kernels: vec![15, 7, 5, 3, 3],
            strides: vec![7, 4, 3, 2, 2],
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let n = self.filters.len();
        if n == 0 || self.kernels.len() != n || self.strides.len() != n {
            return Err(MobreError::Config(
                "tokenizer filters/kernels/strides must be non-empty and equally long".into(),
            ));
        }
        if self.kernels.iter().chain(&self.strides).chain(&self.filters).any(|&v| v == 0) {
            return Err(MobreError::Config("tokenizer sizes must be positive".into()));
        }
        if *self.filters.last().unwrap() != d_model {
            return Err(MobreError::Config(format!(
                "final conv stage width {} must equal d_model {d_model}",
                self.filters.last().unwrap()
            )));
        }
        Ok(())
    }

    /// Number of patches produced from `t` samples, or `None` if too short.
    pub fn num_patches(&self, t: usize) -> Option<usize> {
        let mut len = t;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            if len < k {
                return None;
            }
            len = (len - k) / s + 1;
        }
        Some(len)
    }

    /// Shortest input yielding one patch (the cascade's receptive field).
    pub fn min_input_len(&self) -> usize {
        self.kernels
            .iter()
            .zip(&self.strides)
            .rev()
            .fold(1, |len, (&k, &s)| (len - 1) * s + k)
    }

    /// Product of the strides: samples between consecutive patches.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }
}

pub fn conv_weight_name(stage: usize) -> String {
    format!("tokenizer.conv{stage}.weight")
}

pub fn conv_bias_name(stage: usize) -> String {
    format!("tokenizer.conv{stage}.bias")
}

pub const TEMPORAL_EMB: &str = "tokenizer.temporal_emb";
pub const REGION_EMB: &str = "tokenizer.region_emb";

pub fn init_params<T: Scalar>(
    rng: &mut ChaCha8Rng,
    cfg: &TokenizerConfig,
    d_model: usize,
    num_regions: usize,
    max_patches: usize,
    out: &mut ModelParams<T>,
) {
    let mut cin = 1;
    for (i, (&f, &k)) in cfg.filters.iter().zip(&cfg.kernels).enumerate() {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        out.insert(conv_weight_name(i), uniform(rng, &[f, cin, k], bound));
        out.insert(conv_bias_name(i), uniform(rng, &[f], bound));
        cin = f;
    }
    out.insert(TEMPORAL_EMB, normal(rng, &[max_patches, d_model], 0.02));
    out.insert(REGION_EMB, normal(rng, &[num_regions, d_model], 0.02));
}

/// A tokenizer-ready input: channels-first samples and region indices.
#[derive(Clone, Debug)]
pub struct ChannelInput<T> {
    /// `[C, 1, T]`
    pub samples: Tensor<T>,
    pub regions: Vec<usize>,
}

impl<T: Scalar> ChannelInput<T> {
    /// Transposes row-major `[T × C]` samples to `[C, 1, T]`.
    pub fn from_time_major(samples: &[f64], t: usize, c: usize, regions: Vec<usize>) -> Self {
        let mut data = vec![T::zero(); t * c];
        for ti in 0..t {
            for ci in 0..c {
                data[ci * t + ti] = T::from_f64c(samples[ti * c + ci]);
            }
        }
        ChannelInput {
            samples: Tensor::new(vec![c, 1, t], data),
            regions,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn num_samples(&self) -> usize {
        self.samples.shape()[2]
    }
}

/// Output of [`tokenize`]: `tokens` is `[P·C × d]` with row `p·C + c`.
#[derive(Clone, Debug)]
pub struct TokenGrid<T> {
    pub tokens: Tensor<T>,
    pub region_index: Vec<usize>,
    pub mask: Vec<bool>,
    pub num_patches: usize,
    pub num_channels: usize,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn token(&self, p: usize, c: usize) -> &[T] {
        self.tokens.row(p * self.num_channels + c)
    }
}

/// Conv cascade only: returns the content tokens `[P·C × d]` and `P`.
pub fn conv_tokens<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &TokenizerConfig,
    input: &ChannelInput<T>,
) -> Result<(Var, usize)> {
    let t = input.num_samples();
    let c = input.num_channels();
    let p = cfg.num_patches(t).ok_or(MobreError::SignalTooShort {
        required: cfg.min_input_len(),
        got: t,
    })?;
    let mut x = g.constant(input.samples.clone());
    let stages = cfg.filters.len();
    for i in 0..stages {
        let w = b.get(g, &conv_weight_name(i))?;
        let bias = b.get(g, &conv_bias_name(i))?;
        x = g.conv1d(x, w, bias, cfg.strides[i]);
        if i + 1 < stages {
            x = g.gelu(x);
        }
    }
    // [C, d, P] -> [P·C, d]
    let d = *cfg.filters.last().unwrap();
    let mut idx = Vec::with_capacity(p * c * d);
    for pi in 0..p {
        for ci in 0..c {
            for j in 0..d {
                idx.push(ci * d * p + j * p + pi);
            }
        }
    }
    Ok((g.gather(x, Rc::new(idx), &[p * c, d]), p))
}

/// Adds temporal embedding `p` and region embedding `q(c)` to row `p·C + c`.
pub fn add_embeddings<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    content: Var,
    num_patches: usize,
    regions: &[usize],
) -> Result<Var> {
    let c = regions.len();
    let temporal = b.get(g, TEMPORAL_EMB)?;
    let region = b.get(g, REGION_EMB)?;
    let max_p = g.shape(temporal)[0];
    let num_regions = g.shape(region)[0];
    if num_patches > max_p {
        return Err(MobreError::Config(format!(
            "{num_patches} patches exceed temporal embedding table of {max_p}"
        )));
    }
    if let Some(&bad) = regions.iter().find(|&&r| r >= num_regions) {
        return Err(MobreError::RegionOutOfRange {
            region: bad,
            num_regions,
        });
    }
    let t_rows: Vec<usize> = (0..num_patches).flat_map(|p| std::iter::repeat_n(p, c)).collect();
    let r_rows: Vec<usize> = (0..num_patches).flat_map(|_| regions.iter().copied()).collect();
    let te = g.gather_rows(temporal, &t_rows);
    let re = g.gather_rows(region, &r_rows);
    let x = g.add(content, te);
    Ok(g.add(x, re))
}

/// Standalone tokenization of one input (no gradient bookkeeping kept).
pub fn tokenize<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &TokenizerConfig,
    input: &ChannelInput<T>,
) -> Result<TokenGrid<T>> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let (content, p) = conv_tokens(&mut g, &mut b, cfg, input)?;
    let tokens = add_embeddings(&mut g, &mut b, content, p, &input.regions)?;
    let out = g.value(tokens).clone();
    if !out.all_finite() {
        return Err(MobreError::NonFinite("tokenizer output".into()));
    }
    let c = input.num_channels();
    Ok(TokenGrid {
        tokens: out,
        region_index: input.regions.clone(),
        mask: vec![false; p * c],
        num_patches: p,
        num_channels: c,
    })
}
