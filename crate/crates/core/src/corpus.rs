//! On-disk corpus layout: one directory per subject holding `manifest.json`
//! and one little-endian f32 file per recording (row-major `[T × C]`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MobreError, Result};
use crate::fsio::{read, read_string, write_atomic};
use crate::synth::{Recording, RegionMap, TaskSpec};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordingEntry {
    pub file: String,
    pub recording_id: usize,
    pub num_samples: usize,
    pub num_channels: usize,
    pub labels: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectManifest {
    pub subject_id: usize,
    pub sample_rate: f64,
    pub region_map: RegionMap,
    pub tasks: Vec<TaskSpec>,
    pub recordings: Vec<RecordingEntry>,
}

pub fn subject_dir_name(subject: usize) -> String {
    format!("subject_{subject:03}")
}

/// Writes every subject under `root`.
pub fn write_corpus(root: &Path, recordings: &[Recording], tasks: &[TaskSpec]) -> Result<()> {
    let mut by_subject: BTreeMap<usize, Vec<&Recording>> = BTreeMap::new();
    for r in recordings {
        by_subject.entry(r.subject_id).or_default().push(r);
    }
    for (subject, recs) in by_subject {
        let dir = root.join(subject_dir_name(subject));
        let mut entries = Vec::with_capacity(recs.len());
        for r in &recs {
            let file = format!("rec_{:05}.f32", r.recording_id);
            let mut bytes = Vec::with_capacity(r.samples.len() * 4);
            for &v in &r.samples {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            write_atomic(&dir.join(&file), &bytes)?;
            entries.push(RecordingEntry {
                file,
                recording_id: r.recording_id,
                num_samples: r.num_samples,
                num_channels: r.num_channels,
                labels: r.labels.clone(),
            });
        }
        let manifest = SubjectManifest {
            subject_id: subject,
            sample_rate: recs[0].sample_rate,
            region_map: recs[0].region_map.clone(),
            tasks: tasks.to_vec(),
            recordings: entries,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| MobreError::Corpus(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    }
    Ok(())
}

/// Reads every `subject_*` directory under `root`, in name order.
pub fn read_corpus(root: &Path) -> Result<(Vec<Recording>, Vec<TaskSpec>)> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| MobreError::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(MobreError::Corpus(format!(
            "no subject manifests under {}",
            root.display()
        )));
    }
    let mut recordings = Vec::new();
    let mut tasks: Option<Vec<TaskSpec>> = None;
    for dir in dirs {
        let text = read_string(&dir.join(MANIFEST))?;
        let m: SubjectManifest = serde_json::from_str(&text)
            .map_err(|e| MobreError::Corpus(format!("{}: {e}", dir.display())))?;
        m.region_map.validate()?;
        match &tasks {
            None => tasks = Some(m.tasks.clone()),
            Some(t) if *t != m.tasks => {
                return Err(MobreError::Corpus("subjects disagree on the task list".into()))
            }
            _ => {}
        }
        for e in &m.recordings {
            if e.num_channels != m.region_map.num_channels() {
                return Err(MobreError::Corpus(format!(
                    "{}: {} channels but region map has {}",
                    e.file,
                    e.num_channels,
                    m.region_map.num_channels()
                )));
            }
            let bytes = read(&dir.join(&e.file))?;
            let expected = e.num_samples * e.num_channels * 4;
            if bytes.len() != expected {
                return Err(MobreError::Corpus(format!(
                    "{}: {} bytes, manifest implies {expected}",
                    e.file,
                    bytes.len()
                )));
            }
            let samples = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            recordings.push(Recording {
                subject_id: m.subject_id,
                recording_id: e.recording_id,
                samples,
                num_samples: e.num_samples,
                num_channels: e.num_channels,
                sample_rate: m.sample_rate,
                region_map: m.region_map.clone(),
                labels: e.labels.clone(),
            });
        }
    }
    Ok((recordings, tasks.unwrap_or_default()))
}
