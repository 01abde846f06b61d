//! Experiment configuration: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coupcycle::MergeConfig;
use crate::error::{MobreError, Result};
use crate::fsio;
use crate::model::{ClsMode, LocalFfn, ModelConfig};
use crate::optim::AdamWConfig;
use crate::preprocess::PreprocessConfig;
use crate::rmae::{MaskRatio, RmaeConfig};
use crate::synth::{SubjectSpec, SynthConfig, TaskSpec};
use crate::tokenizer::TokenizerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub rmae: RmaeConfig,
    pub merge: MergeConfig,
    pub train: TrainConfig,
    /// Seeds used by multi-seed commands (`ablate`, `loso`).
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            rmae: RmaeConfig {
                epochs: 800,
                ..RmaeConfig::default()
            },
            merge: MergeConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

pub const PRESETS: [&str; 3] = ["large", "desk", "tiny"];

impl ExperimentConfig {
    /// Full-size architecture and optimizer settings.
    pub fn large() -> Self {
        Self::default()
    }

    /// Single-core desk scale used by the acceptance experiments.
    pub fn desk() -> Self {
        let d = 32;
        ExperimentConfig {
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig {
                tokenizer: TokenizerConfig {
                    filters: vec![8, 16, 16, 32, d],
                    ..TokenizerConfig::default()
                },
                d_model: d,
                num_blocks: 2,
                num_heads: 4,
                mlp_hidden: 64,
                max_patches: 4,
                pred_head_hidden: 64,
                ..ModelConfig::default()
            },
            rmae: RmaeConfig {
                epochs: 10,
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    weight_decay: 0.05,
                    ..AdamWConfig::default()
                },
                ..RmaeConfig::default()
            },
            merge: MergeConfig::default(),
            train: TrainConfig {
                epochs: 50,
                optimizer: AdamWConfig {
                    lr: 2e-3,
                    ..AdamWConfig::default()
                },
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2, 3, 4],
        }
    }

    /// Smallest configuration exercising every pathway; used for gradient checks.
    pub fn tiny() -> Self {
        let tasks = vec![
            TaskSpec {
                task_id: 0,
                name: "a".into(),
                num_classes: 3,
                relevant_regions: vec![0],
            },
            TaskSpec {
                task_id: 1,
                name: "b".into(),
                num_classes: 2,
                relevant_regions: vec![1],
            },
        ];
        ExperimentConfig {
            synth: SynthConfig {
                region_names: ["A", "B", "C"].map(String::from).to_vec(),
                subjects: vec![
                    SubjectSpec {
                        channels: 4,
                        channel_to_region: None,
                    };
                    2
                ],
                tasks,
                samples_per_class: 4,
                sample_rate: 512.0,
                num_samples: 64,
                min_preprocessed_samples: 9,
                ..SynthConfig::default()
            },
            preprocess: PreprocessConfig {
                lowpass_taps: 31,
                ..PreprocessConfig::default()
            },
            model: ModelConfig {
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
                max_patches: 16,
                task_classes: vec![3, 2],
                cls_mode: ClsMode::TaskDisentangled,
                cls_width: 2,
                pred_head_hidden: 8,
            },
            rmae: RmaeConfig {
                epochs: 2,
                ..RmaeConfig::default()
            },
            merge: MergeConfig::default(),
            train: TrainConfig {
                epochs: 2,
                dtype: crate::scalar::DType::F64,
                ..TrainConfig::default()
            },
            seeds: vec![0],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "large" => Some(Self::large()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| MobreError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// A preset name or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let text = fsio::read_string(Path::new(spec))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.rmae.mask_ratio.validate()?;
        self.train.validate()?;
        if let MaskRatio::Fixed { r } = self.rmae.mask_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(MobreError::InvalidMaskRatio(r));
            }
        }
        let classes: Vec<usize> = self.synth.tasks.iter().map(|t| t.num_classes).collect();
        if classes != self.model.task_classes {
            return Err(MobreError::Config(format!(
                "model.task_classes {:?} differ from synth tasks {classes:?}",
                self.model.task_classes
            )));
        }
        if self.model.num_regions != self.synth.region_names.len() {
            return Err(MobreError::Config(format!(
                "model.num_regions {} differs from {} synth regions",
                self.model.num_regions,
                self.synth.region_names.len()
            )));
        }
        if self.synth.target_rate != self.preprocess.target_rate {
            return Err(MobreError::Config(format!(
                "synth.target_rate {} differs from preprocess.target_rate {}",
                self.synth.target_rate, self.preprocess.target_rate
            )));
        }
        if self.synth.num_samples < self.preprocess.lowpass_taps {
            return Err(MobreError::SignalTooShort {
                required: self.preprocess.lowpass_taps,
                got: self.synth.num_samples,
            });
        }
        let len = (self.synth.num_samples as f64 * self.preprocess.target_rate / self.synth.sample_rate).ceil() as usize;
        match self.model.tokenizer.num_patches(len) {
            None => {
                return Err(MobreError::SignalTooShort {
                    required: self.model.tokenizer.min_input_len(),
                    got: len,
                })
            }
            Some(p) if p > self.model.max_patches => {
                return Err(MobreError::Config(format!(
                    "{p} patches exceed model.max_patches {}",
                    self.model.max_patches
                )))
            }
            _ => {}
        }
        if self.synth.min_preprocessed_samples < self.model.tokenizer.min_input_len() {
            return Err(MobreError::Config(format!(
                "synth.min_preprocessed_samples {} below tokenizer minimum {}",
                self.synth.min_preprocessed_samples,
                self.model.tokenizer.min_input_len()
            )));
        }
        if self.seeds.is_empty() {
            return Err(MobreError::Config("seeds must not be empty".into()));
        }
        Ok(())
    }
}
