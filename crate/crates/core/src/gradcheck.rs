//! Central finite-difference check of the analytic gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{MobreError, Result};
use crate::model::{forward, init_model, loss, Binder, ForwardOptions, ModelConfig};
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::tokenizer::ChannelInput;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Coordinates skipped because a perturbation changed the expert selection.
    pub routing_flips: usize,
    pub step: f64,
}

/// A seeded random problem at the requested size.
pub struct GradcheckCase {
    pub params: ModelParams<f64>,
    pub input: ChannelInput<f64>,
    pub labels: BTreeMap<usize, usize>,
}

/// Input length giving exactly `num_patches` patches.
pub fn input_len(cfg: &ModelConfig, num_patches: usize) -> usize {
    cfg.tokenizer.min_input_len() + (num_patches - 1) * cfg.tokenizer.hop()
}

pub fn make_case(cfg: &ModelConfig, channels: usize, num_patches: usize, seed: u64) -> Result<GradcheckCase> {
    if channels == 0 || num_patches == 0 {
        return Err(MobreError::Invalid("gradcheck needs at least one channel and patch".into()));
    }
    let params = init_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let t = input_len(cfg, num_patches);
    let data: Vec<f64> = (0..channels * t).map(|_| rng.sample(StandardNormal)).collect();
    let regions: Vec<usize> = (0..channels).map(|c| c % cfg.num_regions).collect();
    let labels = cfg
        .task_classes
        .iter()
        .enumerate()
        .map(|(task, &k)| (task, rng.random_range(0..k)))
        .collect();
    Ok(GradcheckCase {
        params,
        input: ChannelInput {
            samples: Tensor::new(vec![channels, 1, t], data),
            regions,
        },
        labels,
    })
}

type Selection = Vec<Vec<Vec<usize>>>;

fn eval(
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    case: &GradcheckCase,
    aux_weight: f64,
    with_grads: bool,
) -> Result<(f64, Selection, BTreeMap<String, Tensor<f64>>)> {
    let mut g = Graph::new();
    let mut b = Binder::new(params);
    let out = forward(&mut g, &mut b, cfg, &case.input, ForwardOptions::default())?;
    let l = loss(&mut g, &out, &case.labels, aux_weight)?;
    let value = g.value(l).data()[0];
    let sel = out.decisions.iter().map(|d| d.selected.clone()).collect();
    let grads = if with_grads {
        b.collect_grads(&g.backward(l))
    } else {
        BTreeMap::new()
    };
    Ok((value, sel, grads))
}

/// Compares every analytic partial of `CE + aux_weight · aux` with a central
/// difference of step `h`. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn check(cfg: &ModelConfig, case: &GradcheckCase, aux_weight: f64, h: f64, floor: f64) -> Result<GradcheckReport> {
    let (_, base_sel, grads) = eval(&case.params, cfg, case, aux_weight, true)?;
    let mut params = case.params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        routing_flips: 0,
        step: h,
    };
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let (lp, sp, _) = eval(&params, cfg, case, aux_weight, false)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let (lm, sm, _) = eval(&params, cfg, case, aux_weight, false)?;
            params.get_mut(&name).unwrap().data_mut()[i] = orig;
            if sp != base_sel || sm != base_sel {
                report.routing_flips += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
