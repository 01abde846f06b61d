//! Regional masked autoencoding on subject-specific dense models.
//!
//! Whole brain regions are masked; their content tokens are replaced by one
//! learnable mask embedding (temporal and region embeddings are still added).
//! For every masked token the model predicts the one-sided spectrum of the
//! underlying patch window, which is folded back into the time domain and
//! scored by MSE against the original samples.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{MobreError, Result};
use crate::model::{Binder, ModelConfig, FINAL_NORM};
use crate::moe::{self, ffn, init_block, init_linear, init_norm, SequenceLayout};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{derive_seed, normal, stream_tag, ModelParams};
use crate::scalar::Scalar;
use crate::spectral::{num_bins, synthesis_matrices};
use crate::synth::Recording;
use crate::tensor::Tensor;
use crate::tokenizer::{self, add_embeddings, conv_tokens, ChannelInput};

pub const MASK_TOKEN: &str = "rmae.mask_token";
pub const AMP_HEAD: &str = "rmae.amp_head";
pub const PHASE_HEAD: &str = "rmae.phase_head";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MaskRatio {
    Fixed { r: f64 },
    /// Drawn afresh for every recording.
    Uniform { lo: f64, hi: f64 },
}

impl MaskRatio {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r < 1.0;
        match *self {
            MaskRatio::Fixed { r } if !ok(r) => Err(MobreError::InvalidMaskRatio(r)),
            MaskRatio::Uniform { lo, hi } if !ok(lo) || !ok(hi) || lo > hi => {
                Err(MobreError::InvalidMaskRatio(if ok(lo) { hi } else { lo }))
            }
            _ => Ok(()),
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            MaskRatio::Fixed { r } => r,
            MaskRatio::Uniform { lo, hi } if lo == hi => lo,
            MaskRatio::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmaeConfig {
    pub mask_ratio: MaskRatio,
    pub epochs: usize,
    /// Recordings per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Weight of an extra amplitude-space MSE; 0 scores time-domain MSE only.
    pub spectral_aux_weight: f64,
}

impl Default for RmaeConfig {
    fn default() -> Self {
        RmaeConfig {
            mask_ratio: MaskRatio::Fixed { r: 0.2 },
            epochs: 50,
            batch_size: 4,
            optimizer: AdamWConfig {
                lr: 5e-5,
                weight_decay: 0.05,
                ..AdamWConfig::default()
            },
            spectral_aux_weight: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// `[P × C]`, row-major by patch.
    pub masked: Vec<bool>,
    pub num_patches: usize,
    pub num_channels: usize,
    /// Regions masked, in sampling order.
    pub regions: Vec<usize>,
    pub target_ratio: f64,
}

impl MaskPlan {
    pub fn realized_ratio(&self) -> f64 {
        self.masked.iter().filter(|&&m| m).count() as f64 / self.masked.len() as f64
    }

    pub fn masked_rows(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }
}

/// Samples regions without replacement and masks every token of their
/// channels until the masked fraction first reaches `r`.
pub fn plan_mask(regions: &[usize], num_patches: usize, r: f64, rng: &mut ChaCha8Rng) -> Result<MaskPlan> {
    if !(r > 0.0 && r < 1.0) {
        return Err(MobreError::InvalidMaskRatio(r));
    }
    let c = regions.len();
    if c == 0 || num_patches == 0 {
        return Err(MobreError::NoMaskedTokens);
    }
    let mut present: Vec<usize> = regions.to_vec();
    present.sort_unstable();
    present.dedup();
    present.shuffle(rng);
    let mut channel_masked = vec![false; c];
    let mut count = 0;
    let mut chosen = Vec::new();
    for q in present {
        if count as f64 / c as f64 >= r {
            break;
        }
        chosen.push(q);
        for (ch, &reg) in regions.iter().enumerate() {
            if reg == q {
                channel_masked[ch] = true;
                count += 1;
            }
        }
    }
    let masked = (0..num_patches * c).map(|i| channel_masked[i % c]).collect();
    Ok(MaskPlan {
        masked,
        num_patches,
        num_channels: c,
        regions: chosen,
        target_ratio: r,
    })
}

/// Parameters of a subject-specific dense model with reconstruction heads.
pub fn init_rmae_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let dense = cfg.dense();
    dense.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ModelParams::new();
    let d = dense.d_model;
    tokenizer::init_params(&mut rng, &dense.tokenizer, d, dense.num_regions, dense.max_patches, &mut out);
    for layer in 0..dense.num_blocks {
        init_block(&mut rng, &dense, layer, &mut out);
    }
    init_norm(&mut out, FINAL_NORM, d);
    let bins = num_bins(dense.tokenizer.hop());
    out.insert(MASK_TOKEN, normal(&mut rng, &[1, d], 0.02));
    let h = dense.pred_head_hidden;
    init_linear(&mut rng, &mut out, &format!("{AMP_HEAD}.fc1"), d, h);
    init_linear(&mut rng, &mut out, &format!("{AMP_HEAD}.fc2"), h, bins);
    init_linear(&mut rng, &mut out, &format!("{PHASE_HEAD}.fc1"), d, h);
    init_linear(&mut rng, &mut out, &format!("{PHASE_HEAD}.fc2"), h, 2 * bins);
    Ok(out)
}

/// Original samples of each masked token's patch window, `[M × N]`.
pub fn masked_targets<T: Scalar>(input: &ChannelInput<T>, plan: &MaskPlan, hop: usize) -> Tensor<T> {
    let c = input.num_channels();
    let t = input.num_samples();
    let rows = plan.masked_rows();
    let mut out = Vec::with_capacity(rows.len() * hop);
    for &s in &rows {
        let (p, ch) = (s / c, s % c);
        let start = p * hop;
        out.extend_from_slice(&input.samples.data()[ch * t + start..ch * t + start + hop]);
    }
    Tensor::new(vec![rows.len(), hop], out)
}

pub struct RmaeForward {
    pub loss: Var,
    /// Reconstructed patches `[M × N]`.
    pub recon: Var,
    pub amplitude: Var,
    pub phase_sin: Var,
    pub phase_cos: Var,
}

/// Masked forward pass and time-domain reconstruction loss for one input.
pub fn rmae_forward<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    b: &mut Binder<'a, T>,
    cfg: &ModelConfig,
    input: &ChannelInput<T>,
    plan: &MaskPlan,
    spectral_aux_weight: f64,
) -> Result<RmaeForward> {
    let dense = cfg.dense();
    let hop = dense.tokenizer.hop();
    let bins = num_bins(hop);
    let (content, p) = conv_tokens(g, b, &dense.tokenizer, input)?;
    let c = input.num_channels();
    if plan.num_patches != p || plan.num_channels != c {
        return Err(MobreError::ShapeMismatch {
            name: "mask plan".into(),
            expected: vec![p, c],
            got: vec![plan.num_patches, plan.num_channels],
        });
    }
    let masked = plan.masked_rows();
    if masked.is_empty() {
        return Err(MobreError::NoMaskedTokens);
    }
    let s = p * c;
    let mask_tok = b.get(g, MASK_TOKEN)?;
    let pool = g.concat_rows(&[content, mask_tok]);
    let pick: Vec<usize> = (0..s).map(|i| if plan.masked[i] { s } else { i }).collect();
    let replaced = g.gather_rows(pool, &pick);
    let tokens = add_embeddings(g, b, replaced, p, &input.regions)?;
    let layout = SequenceLayout {
        cls_rows: 0,
        num_patches: p,
        regions: input.regions.clone(),
        num_regions: dense.num_regions,
    };
    let stack = moe::stack_forward(g, b, &dense, tokens, &layout, None)?;
    let hidden = g.gather_rows(stack.x, &masked);
    let hidden = moe::norm(g, b, FINAL_NORM, hidden)?;
    let m = masked.len();

    let amp = ffn(g, b, AMP_HEAD, hidden)?;
    let amp = g.softplus(amp);
    let raw_phase = ffn(g, b, PHASE_HEAD, hidden)?;
    let unit = g.pair_normalize(raw_phase);
    let sin_idx: Vec<usize> = (0..m * bins).map(|i| 2 * i).collect();
    let cos_idx: Vec<usize> = (0..m * bins).map(|i| 2 * i + 1).collect();
    let sin = g.gather(unit, Rc::new(sin_idx), &[m, bins]);
    let cos = g.gather(unit, Rc::new(cos_idx), &[m, bins]);

    let (cm, sm) = synthesis_matrices(hop);
    let cm = g.constant(Tensor::from_f64(&[bins, hop], &cm));
    let sm = g.constant(Tensor::from_f64(&[bins, hop], &sm));
    let ac = g.mul(amp, cos);
    let as_ = g.mul(amp, sin);
    let real = g.matmul(ac, cm);
    let imag = g.matmul(as_, sm);
    let recon = g.sub(real, imag);

    let target = g.constant(masked_targets(input, plan, hop));
    let mut loss = g.mse(recon, target);
    if spectral_aux_weight != 0.0 {
        let mut amps = Vec::with_capacity(m * bins);
        for row in g.value(target).data().chunks(hop) {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64c()).collect();
            amps.extend(crate::spectral::spectral_encode(&row)?.amplitude);
        }
        let at = g.constant(Tensor::from_f64(&[m, bins], &amps));
        let aux = g.mse(amp, at);
        let aux = g.scale(aux, T::from_f64c(spectral_aux_weight));
        loss = g.add(loss, aux);
    }
    Ok(RmaeForward {
        loss,
        recon,
        amplitude: amp,
        phase_sin: sin,
        phase_cos: cos,
    })
}

pub fn channel_input<T: Scalar>(rec: &Recording) -> ChannelInput<T> {
    ChannelInput::from_time_major(
        &rec.samples,
        rec.num_samples,
        rec.num_channels,
        rec.region_map.channel_to_region.clone(),
    )
}

pub struct PretrainOutcome<T> {
    pub params: ModelParams<T>,
    /// Mean training loss per epoch; entry 0 is the untrained model.
    pub losses: Vec<f64>,
}

/// Mean masked reconstruction loss over `recs` with plans drawn from `seed`.
pub fn evaluate_rmae<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    rcfg: &RmaeConfig,
    recs: &[Recording],
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for rec in recs {
        let input = channel_input::<T>(rec);
        let p = cfg.tokenizer.num_patches(rec.num_samples).ok_or(MobreError::SignalTooShort {
            required: cfg.tokenizer.min_input_len(),
            got: rec.num_samples,
        })?;
        let r = rcfg.mask_ratio.draw(&mut rng);
        let plan = plan_mask(&input.regions, p, r, &mut rng)?;
        let mut g = Graph::new();
        let mut b = Binder::new(params);
        let f = rmae_forward(&mut g, &mut b, cfg, &input, &plan, rcfg.spectral_aux_weight)?;
        total += g.value(f.loss).data()[0].to_f64c();
    }
    Ok(total / recs.len() as f64)
}

/// Pretrains one subject-specific dense model on that subject's recordings,
/// starting from the initialization drawn from `init_seed`.
pub fn pretrain_subject<T: Scalar>(
    cfg: &ModelConfig,
    rcfg: &RmaeConfig,
    recs: &[Recording],
    init_seed: u64,
    seed: u64,
) -> Result<PretrainOutcome<T>> {
    rcfg.mask_ratio.validate()?;
    if recs.is_empty() {
        return Err(MobreError::EmptySplit("pretraining recordings".into()));
    }
    let mut params = init_rmae_model::<T>(cfg, init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream_tag("rmae-batches")));
    let eval_seed = derive_seed(seed, stream_tag("rmae-eval"));
    let mut opt = AdamW::<T>::new(rcfg.optimizer.clone());
    let bs = rcfg.batch_size.max(1);
    let steps_per_epoch = recs.len().div_ceil(bs);
    let total = rcfg.epochs * steps_per_epoch;
    let mut losses = vec![evaluate_rmae(&params, cfg, rcfg, recs, eval_seed)?];
    let mut order: Vec<usize> = (0..recs.len()).collect();
    let mut step = 0;
    for _ in 0..rcfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(bs) {
            let mut g = Graph::new();
            let mut b = Binder::new(&params);
            let mut sum: Option<Var> = None;
            for &i in batch {
                let input = channel_input::<T>(&recs[i]);
                let p = cfg.tokenizer.num_patches(recs[i].num_samples).ok_or(MobreError::SignalTooShort {
                    required: cfg.tokenizer.min_input_len(),
                    got: recs[i].num_samples,
                })?;
                let r = rcfg.mask_ratio.draw(&mut rng);
                let plan = plan_mask(&input.regions, p, r, &mut rng)?;
                let f = rmae_forward(&mut g, &mut b, cfg, &input, &plan, rcfg.spectral_aux_weight)?;
                sum = Some(match sum {
                    None => f.loss,
                    Some(s) => g.add(s, f.loss),
                });
            }
            let loss = g.scale(sum.unwrap(), T::from_f64c(1.0 / batch.len() as f64));
            let lv = g.value(loss).data()[0].to_f64c();
            if !lv.is_finite() {
                return Err(MobreError::NonFinite(format!("reconstruction loss at step {step}")));
            }
            epoch_loss += lv * batch.len() as f64;
            let grads = b.collect_grads(&g.backward(loss));
            drop(b);
            opt.step(&mut params, &grads, cosine_lr(rcfg.optimizer.lr, step, total));
            step += 1;
        }
        losses.push(epoch_loss / recs.len() as f64);
    }
    Ok(PretrainOutcome { params, losses })
}
