//! Synthetic multi-subject, multi-task recordings with planted,
//! region-localized class structure.
//!
//! Each task owns a set of relevant brain regions. A recording's class for a
//! task is written into every channel of those regions as a band-limited
//! oscillation whose carrier frequency and slow amplitude envelope depend on
//! the class. Every subject gets its own channel count, region layout and
//! per-channel mixing gains, so heterogeneity across subjects exists by
//! construction while the class code stays shared.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MobreError, Result};
use crate::params::{derive_seed, stream_tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub channel_to_region: Vec<usize>,
    pub region_names: Vec<String>,
}

impl RegionMap {
    pub fn new(channel_to_region: Vec<usize>, region_names: Vec<String>) -> Result<Self> {
        let map = RegionMap {
            channel_to_region,
            region_names,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.region_names.is_empty() {
            return Err(MobreError::Config("region map needs at least one region".into()));
        }
        if let Some(&bad) = self
            .channel_to_region
            .iter()
            .find(|&&r| r >= self.region_names.len())
        {
            return Err(MobreError::RegionOutOfRange {
                region: bad,
                num_regions: self.region_names.len(),
            });
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.region_names.len()
    }

    pub fn num_channels(&self) -> usize {
        self.channel_to_region.len()
    }

    /// Sorted list of regions that own at least one channel.
    pub fn present_regions(&self) -> Vec<usize> {
        let mut r = self.channel_to_region.clone();
        r.sort_unstable();
        r.dedup();
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub num_classes: usize,
    pub relevant_regions: Vec<usize>,
}

impl TaskSpec {
    pub fn validate(&self, num_regions: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MobreError::Config(format!(
                "task `{}` needs at least 2 classes",
                self.name
            )));
        }
        if self.relevant_regions.is_empty() {
            return Err(MobreError::Config(format!(
                "task `{}` has no relevant regions",
                self.name
            )));
        }
        if let Some(&r) = self.relevant_regions.iter().find(|&&r| r >= num_regions) {
            return Err(MobreError::RegionOutOfRange {
                region: r,
                num_regions,
            });
        }
        Ok(())
    }
}

/// One multi-channel trial. Samples are row-major `[T × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: usize,
    pub recording_id: usize,
    pub samples: Vec<f64>,
    pub num_samples: usize,
    pub num_channels: usize,
    pub sample_rate: f64,
    pub region_map: RegionMap,
    pub labels: BTreeMap<usize, usize>,
}

impl Recording {
    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.num_samples)
            .map(|t| self.samples[t * self.num_channels + c])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.samples.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub channels: usize,
    /// Explicit channel → region assignment; generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_to_region: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Raw sampling rate before preprocessing.
    pub sample_rate: f64,
    /// Raw samples per recording.
    pub num_samples: usize,
    pub region_names: Vec<String>,
    pub subjects: Vec<SubjectSpec>,
    pub tasks: Vec<TaskSpec>,
    /// Recordings per class of the task with the most classes; every recording
    /// carries one label per task.
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub signal_amplitude: f64,
    /// Microvolt scale applied to the whole signal.
    pub microvolt_scale: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    /// Uniform random phase offset half-width (radians) per recording.
    pub phase_jitter: f64,
    pub carrier_base_hz: f64,
    pub carrier_spacing_hz: f64,
    /// Shortest preprocessed length the tokenizer accepts.
    pub min_preprocessed_samples: usize,
    /// Sampling rate after preprocessing, used for the length check.
    pub target_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            sample_rate: 1024.0,
            num_samples: 2048,
            region_names: ["STG", "PreCG", "PostCG", "VIS"].map(String::from).to_vec(),
            subjects: [8, 10, 6]
                .map(|c| SubjectSpec {
                    channels: c,
                    channel_to_region: None,
                })
                .to_vec(),
            tasks: vec![
                TaskSpec {
                    task_id: 0,
                    name: "initials".into(),
                    num_classes: 23,
                    relevant_regions: vec![0],
                },
                TaskSpec {
                    task_id: 1,
                    name: "finals".into(),
                    num_classes: 11,
                    relevant_regions: vec![1],
                },
                TaskSpec {
                    task_id: 2,
                    name: "tones".into(),
                    num_classes: 4,
                    relevant_regions: vec![2],
                },
            ],
            samples_per_class: 8,
            noise_std: 1.0,
            signal_amplitude: 0.3,
            microvolt_scale: 50.0,
            gain_min: 0.6,
            gain_max: 1.4,
            phase_jitter: 0.0,
            carrier_base_hz: 4.0,
            carrier_spacing_hz: 4.0,
            min_preprocessed_samples: 673,
            target_rate: 512.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.region_names.len();
        if r == 0 {
            return Err(MobreError::Config("at least one region required".into()));
        }
        if self.subjects.is_empty() || self.tasks.is_empty() {
            return Err(MobreError::Config("need at least one subject and one task".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i {
                return Err(MobreError::Config(format!(
                    "task ids must be 0..n in order, got {} at position {i}",
                    t.task_id
                )));
            }
            t.validate(r)?;
        }
        for s in &self.subjects {
            if s.channels == 0 {
                return Err(MobreError::Config("subject with zero channels".into()));
            }
            if let Some(map) = &s.channel_to_region {
                if map.len() != s.channels {
                    return Err(MobreError::Config(
                        "channel_to_region length differs from channel count".into(),
                    ));
                }
                RegionMap::new(map.clone(), self.region_names.clone())?;
            }
        }
        let pre_len = (self.num_samples as f64 * self.target_rate / self.sample_rate).floor() as usize;
        if pre_len < self.min_preprocessed_samples {
            return Err(MobreError::SignalTooShort {
                required: (self.min_preprocessed_samples as f64 * self.sample_rate / self.target_rate).ceil()
                    as usize,
                got: self.num_samples,
            });
        }
        let top = self.carrier_hz(self.max_classes() - 1);
        if top >= self.sample_rate / 2.0 {
            return Err(MobreError::Config(format!("carrier {top} Hz above Nyquist")));
        }
        if self.samples_per_class == 0 {
            return Err(MobreError::Config("samples_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn max_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.num_classes).max().unwrap_or(0)
    }

    pub fn carrier_hz(&self, class: usize) -> f64 {
        self.carrier_base_hz + self.carrier_spacing_hz * class as f64
    }

    pub fn recordings_per_subject(&self) -> usize {
        self.max_classes() * self.samples_per_class
    }
}

/// Slow amplitude envelope for a class: one of three modulation depths/rates.
fn envelope(class: usize, t_frac: f64) -> f64 {
    match class % 3 {
        0 => 1.0,
        1 => 0.7 + 0.3 * (2.0 * PI * t_frac).cos(),
        _ => 0.7 + 0.3 * (4.0 * PI * t_frac).cos(),
    }
}

/// Deterministic per-(task, class) phase.
fn base_phase(task: usize, class: usize) -> f64 {
    ((task * 31 + class * 17) % 64) as f64 / 64.0 * 2.0 * PI
}

/// Region layout for one subject: every region gets at least one channel when
/// `channels ≥ R`, and the assignment is shuffled per subject.
fn subject_region_map(cfg: &SynthConfig, subject: usize) -> Result<RegionMap> {
    let spec = &cfg.subjects[subject];
    if let Some(map) = &spec.channel_to_region {
        return RegionMap::new(map.clone(), cfg.region_names.clone());
    }
    let r = cfg.region_names.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        stream_tag("region-map") ^ subject as u64,
    ));
    let mut map: Vec<usize> = (0..spec.channels).map(|c| c % r).collect();
    map.shuffle(&mut rng);
    RegionMap::new(map, cfg.region_names.clone())
}

/// Planted class component (without gains or noise) for one channel.
fn planted(cfg: &SynthConfig, region: usize, labels: &BTreeMap<usize, usize>, phase_offsets: &[f64]) -> Vec<f64> {
    let t_len = cfg.num_samples;
    let mut out = vec![0.0; t_len];
    for task in &cfg.tasks {
        if !task.relevant_regions.contains(&region) {
            continue;
        }
        let Some(&class) = labels.get(&task.task_id) else { continue };
        let f = cfg.carrier_hz(class);
        let ph = base_phase(task.task_id, class) + phase_offsets[task.task_id];
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / cfg.sample_rate;
            let frac = i as f64 / t_len as f64;
            *o += cfg.signal_amplitude * envelope(class, frac) * (2.0 * PI * f * t + ph).sin();
        }
    }
    out
}

/// Generates the full corpus; recordings are ordered by subject, then index.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let n_rec = cfg.recordings_per_subject();
    let mut corpus = Vec::with_capacity(n_rec * cfg.subjects.len());
    for (s, spec) in cfg.subjects.iter().enumerate() {
        let region_map = subject_region_map(cfg, s)?;
        let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream_tag("subject") ^ s as u64));
        let gains: Vec<f64> = (0..spec.channels)
            .map(|_| srng.random_range(cfg.gain_min..=cfg.gain_max))
            .collect();
        // Balanced, independently shuffled labels per task.
        let label_lists: Vec<Vec<usize>> = cfg
            .tasks
            .iter()
            .map(|t| {
                let mut l: Vec<usize> = (0..n_rec).map(|i| i % t.num_classes).collect();
                l.shuffle(&mut srng);
                l
            })
            .collect();
        for i in 0..n_rec {
            let mut rrng = ChaCha8Rng::seed_from_u64(derive_seed(
                derive_seed(cfg.seed, s as u64),
                stream_tag("recording") ^ i as u64,
            ));
            let labels: BTreeMap<usize, usize> = cfg
                .tasks
                .iter()
                .zip(&label_lists)
                .map(|(t, l)| (t.task_id, l[i]))
                .collect();
            let phase_offsets: Vec<f64> = cfg
                .tasks
                .iter()
                .map(|_| {
                    if cfg.phase_jitter > 0.0 {
                        rrng.random_range(-cfg.phase_jitter..=cfg.phase_jitter)
                    } else {
                        0.0
                    }
                })
                .collect();
            let c = spec.channels;
            let t_len = cfg.num_samples;
            let mut samples = vec![0.0; t_len * c];
            for ch in 0..c {
                let clean = planted(cfg, region_map.channel_to_region[ch], &labels, &phase_offsets);
                for (t, &v) in clean.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rrng);
                    samples[t * c + ch] = cfg.microvolt_scale * (gains[ch] * v + cfg.noise_std * z);
                }
            }
            corpus.push(Recording {
                subject_id: s,
                recording_id: i,
                samples,
                num_samples: t_len,
                num_channels: c,
                sample_rate: cfg.sample_rate,
                region_map: region_map.clone(),
                labels,
            });
        }
    }
    Ok(corpus)
}
