//! Run artifacts on disk: prompt files, sample JSONL and tree JSON.
//!
//! Sample lines carry one sample each, flattened with its prompt id, and are
//! written in `(prompt order, sample_index)` order so identical runs produce
//! identical bytes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Sample, SampleSet, Strategy};
use crate::engine::Prompt;
use crate::toa::TreeSnapshot;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{0}")]
    Encode(String),
}

impl IoError {
    fn file(path: &Path, source: std::io::Error) -> Self {
        Self::File {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, IoError> {
    let file = fs::File::open(path).map_err(|e| IoError::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads `{prompt_id, question, answer?}` lines. Prompt ids must be unique.
pub fn read_prompts(path: &Path) -> Result<Vec<Prompt>, IoError> {
    let prompts: Vec<Prompt> = read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for (i, p) in prompts.iter().enumerate() {
        if !seen.insert(p.prompt_id.as_str()) {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("duplicate prompt_id `{}`", p.prompt_id),
            });
        }
    }
    Ok(prompts)
}

/// One line of a samples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt_id: String,
    pub strategy: Strategy,
    pub sample_index: usize,
    pub agent_id: String,
    pub parent_index: Option<usize>,
    pub moa_context_indices: Vec<usize>,
    pub reward: Option<f64>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub seed: u64,
    pub text: String,
}

impl SampleRecord {
    pub fn new(set: &SampleSet, s: &Sample) -> Self {
        Self {
            prompt_id: set.prompt_id.clone(),
            strategy: set.strategy,
            sample_index: s.sample_index,
            agent_id: s.agent_id.clone(),
            parent_index: s.parent_index,
            moa_context_indices: s.moa_context_indices.clone(),
            reward: s.reward,
            prompt_tokens: s.prompt_tokens,
            completion_tokens: s.completion_tokens,
            seed: s.seed,
            text: s.text.clone(),
        }
    }

    pub fn into_sample(self) -> Sample {
        Sample {
            sample_index: self.sample_index,
            text: self.text,
            agent_id: self.agent_id,
            parent_index: self.parent_index,
            moa_context_indices: self.moa_context_indices,
            reward: self.reward,
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
            seed: self.seed,
        }
    }
}

/// Serializes the sets as JSONL, one sample per line.
pub fn samples_to_jsonl<'a>(sets: impl IntoIterator<Item = &'a SampleSet>) -> Result<String, IoError> {
    let mut out = String::new();
    for set in sets {
        for s in &set.samples {
            let line = serde_json::to_string(&SampleRecord::new(set, s)).map_err(|e| IoError::Encode(e.to_string()))?;
            out.push_str(&line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_samples<'a>(path: &Path, sets: impl IntoIterator<Item = &'a SampleSet>) -> Result<(), IoError> {
    write_text(path, &samples_to_jsonl(sets)?)
}

/// Reads a samples file back into per-prompt sets, in first-seen order.
/// Questions are not stored in the file and come back empty.
pub fn read_samples(path: &Path) -> Result<Vec<SampleSet>, IoError> {
    let records: Vec<SampleRecord> = read_jsonl(path)?;
    let mut sets: Vec<SampleSet> = Vec::new();
    for r in records {
        let set = match sets.iter_mut().position(|s| s.prompt_id == r.prompt_id) {
            Some(i) => &mut sets[i],
            None => {
                sets.push(SampleSet::new(&r.prompt_id, "", r.strategy, 0));
                sets.last_mut().expect("just pushed")
            }
        };
        set.capacity += 1;
        set.samples.push(r.into_sample());
    }
    for set in &mut sets {
        set.samples.sort_by_key(|s| s.sample_index);
    }
    Ok(sets)
}

pub fn tree_to_json(tree: &TreeSnapshot) -> Result<String, IoError> {
    serde_json::to_string_pretty(tree)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| IoError::Encode(e.to_string()))
}

pub fn write_tree(path: &Path, tree: &TreeSnapshot) -> Result<(), IoError> {
    write_text(path, &tree_to_json(tree)?)
}

pub fn read_tree(path: &Path) -> Result<TreeSnapshot, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::Encode(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| IoError::file(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| IoError::file(path, e))
}
