//! Checkpoint files: a text header followed by raw little-endian tensor data.
//!
//! ```text
//! NMOBRE-CKPT 1 <sha256 of everything after this line>
//! stage trained
//! parents <hash>,<hash>
//! dtype f32
//! rng <seed>
//! config <model config as JSON>
//! meta <key> <value>
//! tensor <name> <d0,d1,...> <byte offset> <byte length>
//! ...
//! ---
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupcycle::is_shared;
use crate::error::{MobreError, Result};
use crate::fsio;
use crate::model::{expected_shapes, validate_params, ModelConfig};
use crate::params::ModelParams;
use crate::rmae::init_rmae_model;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::tokenizer::REGION_EMB;

pub const MAGIC: &str = "NMOBRE-CKPT";
pub const FORMAT_VERSION: u32 = 1;
const SEPARATOR: &str = "---\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Subject-specific dense model with reconstruction heads.
    Rmae,
    /// Merged shared tensors.
    Merged,
    /// Full supervised model.
    Trained,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Rmae => "rmae",
            Stage::Merged => "merged",
            Stage::Trained => "trained",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rmae" => Some(Stage::Rmae),
            "merged" => Some(Stage::Merged),
            "trained" => Some(Stage::Trained),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub stage: Stage,
    /// Content hashes of the checkpoints this one was derived from.
    pub parents: Vec<String>,
    /// Seed of the stream that produced the tensors.
    pub rng_seed: u64,
    pub model: ModelConfig,
    /// Free-form annotations, e.g. the subject a pretrained model belongs to.
    pub meta: BTreeMap<String, String>,
    pub params: ModelParams<T>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn format_err(msg: impl Into<String>) -> MobreError {
    MobreError::CheckpointFormat(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(&format!("stage {}\n", self.stage));
        let parents = if self.parents.is_empty() {
            "-".to_string()
        } else {
            self.parents.join(",")
        };
        header.push_str(&format!("parents {parents}\n"));
        header.push_str(&format!("dtype {}\n", T::DTYPE.as_str()));
        header.push_str(&format!("rng {}\n", self.rng_seed));
        header.push_str(&format!(
            "config {}\n",
            serde_json::to_string(&self.model).expect("config serializes")
        ));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::with_capacity(self.params.num_scalars() * T::DTYPE.width());
        for (name, t) in self.params.iter() {
            let offset = blob.len();
            for &v in t.data() {
                v.write_le(&mut blob);
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), blob.len() - offset));
        }
        header.push_str(SEPARATOR);
        let mut body = header.into_bytes();
        body.extend_from_slice(&blob);
        let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", sha256_hex(&body)).into_bytes();
        out.extend_from_slice(&body);
        out
    }

    /// Parses a checkpoint; tensors stored at another precision are cast.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err("missing header line"))?;
        let first = std::str::from_utf8(&bytes[..nl]).map_err(|_| format_err("header is not UTF-8"))?;
        let mut parts = first.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(format_err("not a checkpoint file"));
        }
        let version = parts.next().ok_or_else(|| format_err("missing format version"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(MobreError::Version(version.to_string()));
        }
        let hash = parts.next().ok_or_else(|| format_err("missing content hash"))?;
        let body = &bytes[nl + 1..];
        if sha256_hex(body) != hash {
            return Err(MobreError::Integrity("content hash mismatch".into()));
        }
        let sep = body
            .windows(SEPARATOR.len() + 1)
            .position(|w| w[0] == b'\n' && &w[1..] == SEPARATOR.as_bytes())
            .ok_or_else(|| format_err("missing header terminator"))?;
        let header = std::str::from_utf8(&body[..sep + 1]).map_err(|_| format_err("header is not UTF-8"))?;
        let blob = &body[sep + 1 + SEPARATOR.len()..];

        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut tensors = Vec::new();
        let mut meta = BTreeMap::new();
        for line in header.lines() {
            let (key, rest) = line.split_once(' ').ok_or_else(|| format_err(format!("bad header line `{line}`")))?;
            if key == "tensor" {
                tensors.push(rest);
            } else if key == "meta" {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.insert(k.to_string(), v.to_string());
            } else if fields.insert(key, rest).is_some() {
                return Err(format_err(format!("duplicate header field `{key}`")));
            }
        }
        let field = |k: &str| fields.get(k).copied().ok_or_else(|| format_err(format!("missing header field `{k}`")));
        let stage_s = field("stage")?;
        let stage = Stage::parse(stage_s).ok_or_else(|| format_err(format!("unknown stage `{stage_s}`")))?;
        let parents = match field("parents")? {
            "-" => Vec::new(),
            p => p.split(',').map(String::from).collect(),
        };
        let dtype_s = field("dtype")?;
        let dtype = DType::parse(dtype_s).ok_or_else(|| format_err(format!("unknown dtype `{dtype_s}`")))?;
        let rng_seed = field("rng")?.parse().map_err(|_| format_err("bad rng field"))?;
        let model: ModelConfig =
            serde_json::from_str(field("config")?).map_err(|e| format_err(format!("bad config: {e}")))?;

        let mut params = ModelParams::new();
        for t in tensors {
            let cols: Vec<&str> = t.split(' ').collect();
            let [name, dims, offset, len] = cols[..] else {
                return Err(format_err(format!("bad tensor line `{t}`")));
            };
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse().map_err(|_| format_err(format!("bad shape for {name}"))))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| format_err(format!("bad offset for {name}")))?;
            let len: usize = len.parse().map_err(|_| format_err(format!("bad length for {name}")))?;
            let count: usize = shape.iter().product();
            let w = dtype.width();
            if len != count * w || offset.checked_add(len).is_none_or(|end| end > blob.len()) {
                return Err(format_err(format!("tensor {name} extends past the data section")));
            }
            let raw = &blob[offset..offset + len];
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks_exact(w).map(|c| T::from_f64c(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks_exact(w).map(|c| T::from_f64c(f64::read_le(c))).collect(),
            };
            if params.contains(name) {
                return Err(format_err(format!("duplicate tensor {name}")));
            }
            params.insert(name, Tensor::new(shape, data));
        }
        let ckpt = Checkpoint {
            stage,
            parents,
            rng_seed,
            model,
            meta,
            params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Checks the tensor names and shapes against the stored configuration.
    pub fn validate(&self) -> Result<()> {
        match self.stage {
            Stage::Trained => validate_params(&self.model, &self.params),
            Stage::Rmae => {
                let reference: ModelParams<f32> = init_rmae_model(&self.model, 0)?;
                let shapes = reference.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
                check_shapes(&self.params, &shapes, false)
            }
            Stage::Merged => {
                let shapes = expected_shapes(&self.model)?
                    .into_iter()
                    .filter(|(n, _)| is_shared(n) || n == REGION_EMB)
                    .collect();
                check_shapes(&self.params, &shapes, true)
            }
        }
    }

    /// Content hash recorded in the first line of the file.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        sha256_hex(&bytes[nl + 1..])
    }

    pub fn require_stage(&self, accepted: &[Stage]) -> Result<()> {
        if accepted.contains(&self.stage) {
            Ok(())
        } else {
            Err(MobreError::Stage {
                got: self.stage.to_string(),
                expected: accepted.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", "),
            })
        }
    }

    /// Atomically writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fsio::write_atomic(path, &bytes)?;
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        Ok(sha256_hex(&bytes[nl + 1..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?)
    }
}

/// Stored precision of a checkpoint file, read from its header.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fsio::read(path)?;
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(4096)]).into_owned();
    text.lines()
        .find_map(|l| l.strip_prefix("dtype "))
        .and_then(DType::parse)
        .ok_or_else(|| format_err("missing dtype field"))
}

fn check_shapes<T: Scalar>(params: &ModelParams<T>, shapes: &BTreeMap<String, Vec<usize>>, subset: bool) -> Result<()> {
    if !subset {
        let missing: Vec<String> = shapes.keys().filter(|n| !params.contains(n)).cloned().collect();
        if !missing.is_empty() {
            return Err(MobreError::MissingParams(missing));
        }
    }
    for (name, t) in params.iter() {
        match shapes.get(name) {
            None => return Err(MobreError::Invalid(format!("unexpected tensor {name}"))),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(MobreError::ShapeMismatch {
                    name: name.to_string(),
                    expected: s.clone(),
                    got: t.shape().to_vec(),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::model::init_model;

    fn fresh() -> Checkpoint<f32> {
        let model = ExperimentConfig::tiny().model;
        Checkpoint {
            stage: Stage::Trained,
            parents: vec!["ab".into(), "cd".into()],
            rng_seed: 42,
            meta: [("subject".to_string(), "2".to_string())].into(),
            params: init_model(&model, 3).unwrap(),
            model,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = fresh();
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.params.bit_eq(&c.params));
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!((back.stage, back.rng_seed, &back.parents), (Stage::Trained, 42, &c.parents));
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn every_single_byte_corruption_is_caught() {
        let bytes = fresh().to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        for i in (nl + 1..bytes.len()).step_by(97) {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            assert!(matches!(Checkpoint::<f32>::from_bytes(&b), Err(MobreError::Integrity(_))), "byte {i}");
        }
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::<f32>::from_bytes(truncated), Err(MobreError::Integrity(_))));
    }

    #[test]
    fn unknown_version_is_refused() {
        let bytes = fresh().to_bytes();
        let text = String::from_utf8_lossy(&bytes).replacen("NMOBRE-CKPT 1 ", "NMOBRE-CKPT 2 ", 1);
        assert!(matches!(Checkpoint::<f32>::from_bytes(text.as_bytes()), Err(MobreError::Version(v)) if v == "2"));
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"hello\n"), Err(MobreError::CheckpointFormat(_))));
    }

    #[test]
    fn stage_gate() {
        let c = fresh();
        assert!(c.require_stage(&[Stage::Trained]).is_ok());
        assert!(matches!(c.require_stage(&[Stage::Merged]), Err(MobreError::Stage { .. })));
    }

    #[test]
    fn names_are_checked_against_the_config() {
        let mut c = fresh();
        c.params.remove("heads.0.bias");
        assert!(matches!(Checkpoint::<f32>::from_bytes(&c.to_bytes()), Err(MobreError::MissingParams(_))));
        let mut c = fresh();
        c.stage = Stage::Merged;
        c.params = c.params.filtered(is_shared);
        assert!(Checkpoint::<f32>::from_bytes(&c.to_bytes()).is_ok());
    }

    #[test]
    fn precision_is_converted_on_load() {
        let c = fresh();
        let wide = Checkpoint::<f64>::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(wide.params.cast::<f32>(), c.params);
    }
}
