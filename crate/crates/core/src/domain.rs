//! Shared domain types and the per-prompt sample registry.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One generator agent in the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: String,
    /// Model parameters, used for FLOPs accounting.
    pub param_count: u64,
    /// Name of the entry in the config's `backends` table.
    pub backend_ref: String,
    #[serde(default)]
    pub display_name: String,
}

impl AgentSpec {
    pub fn new(agent_id: impl Into<String>, param_count: u64, backend_ref: impl Into<String>) -> Self {
        let agent_id = agent_id.into();
        Self {
            display_name: agent_id.clone(),
            agent_id,
            param_count,
            backend_ref: backend_ref.into(),
        }
    }

    /// Name sent to chat endpoints as `model`.
    pub fn model_name(&self) -> &str {
        if self.display_name.is_empty() {
            &self.agent_id
        } else {
            &self.display_name
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: 512,
            seed: 0,
        }
    }
}

impl DecodingParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RandomSingle,
    ParallelEnsemble,
    SequentialRefine,
    Moa,
    Toa,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::RandomSingle,
        Strategy::ParallelEnsemble,
        Strategy::SequentialRefine,
        Strategy::Moa,
        Strategy::Toa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::RandomSingle => "random_single",
            Strategy::ParallelEnsemble => "parallel_ensemble",
            Strategy::SequentialRefine => "sequential_refine",
            Strategy::Moa => "moa",
            Strategy::Toa => "toa",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// One generated response with its lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Creation order within the prompt.
    pub sample_index: usize,
    pub text: String,
    pub agent_id: String,
    /// The refined predecessor; absent for fresh generations.
    pub parent_index: Option<usize>,
    /// Every predecessor fed to an aggregation step (mixture-of-agents only).
    #[serde(default)]
    pub moa_context_indices: Vec<usize>,
    pub reward: Option<f64>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Base seed of the generation call.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("sample budget exhausted: set already holds {capacity} samples")]
    BudgetExhausted { capacity: usize },
    #[error("sample {index} refers to predecessor {parent}, which is not an earlier sample")]
    ForwardReference { index: usize, parent: usize },
}

/// The ordered samples produced for one prompt.
///
/// Single writer per prompt; indices are assigned in registration order and
/// never change afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub prompt_id: String,
    pub question: String,
    pub strategy: Strategy,
    /// Target sample count `N`.
    pub capacity: usize,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn new(prompt_id: impl Into<String>, question: impl Into<String>, strategy: Strategy, capacity: usize) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            question: question.into(),
            strategy,
            capacity,
            samples: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.samples.len() == self.capacity
    }

    /// Index the next registered sample will receive.
    pub fn next_index(&self) -> usize {
        self.samples.len()
    }

    pub fn get(&self, index: usize) -> Option<&Sample> {
        self.samples.get(index)
    }

    /// Appends `sample`, overwriting its `sample_index` with the current length.
    pub fn register_sample(&mut self, mut sample: Sample) -> Result<usize, RegistryError> {
        if self.samples.len() >= self.capacity {
            return Err(RegistryError::BudgetExhausted {
                capacity: self.capacity,
            });
        }
        let index = self.samples.len();
        let preds = sample.parent_index.iter().chain(sample.moa_context_indices.iter());
        if let Some(&parent) = preds.into_iter().find(|&&p| p >= index) {
            return Err(RegistryError::ForwardReference { index, parent });
        }
        sample.sample_index = index;
        self.samples.push(sample);
        Ok(index)
    }

    pub fn rewards(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().filter_map(|s| s.reward)
    }

    /// Agents along the refinement lineage ending at `index`, oldest first.
    pub fn lineage(&self, index: usize) -> Vec<&str> {
        let mut agents = Vec::new();
        let mut cursor = self.samples.get(index);
        while let Some(s) = cursor {
            agents.push(s.agent_id.as_str());
            cursor = s.parent_index.and_then(|p| self.samples.get(p));
        }
        agents.reverse();
        agents
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(agent: &str, parent: Option<usize>) -> Sample {
        Sample {
            sample_index: 999,
            text: format!("from {agent}"),
            agent_id: agent.into(),
            parent_index: parent,
            moa_context_indices: Vec::new(),
            reward: Some(0.5),
            prompt_tokens: 3,
            completion_tokens: 2,
            seed: 0,
        }
    }

    #[test]
    fn register_assigns_creation_order() {
        let mut set = SampleSet::new("p", "q", Strategy::Toa, 8);
        assert_eq!(set.register_sample(sample("A", None)).unwrap(), 0);
        for expected in 1..5 {
            assert_eq!(set.register_sample(sample("B", Some(0))).unwrap(), expected);
        }
        assert_eq!(set.register_sample(sample("A", None)).unwrap(), 5);
        assert_eq!(set.samples[5].sample_index, 5);
    }

    #[test]
    fn register_rejects_overflow() {
        let mut set = SampleSet::new("p", "q", Strategy::Toa, 8);
        for _ in 0..8 {
            set.register_sample(sample("A", None)).unwrap();
        }
        assert_eq!(
            set.register_sample(sample("A", None)),
            Err(RegistryError::BudgetExhausted { capacity: 8 })
        );
    }

    #[test]
    fn register_rejects_forward_parent() {
        let mut set = SampleSet::new("p", "q", Strategy::Toa, 4);
        set.register_sample(sample("A", None)).unwrap();
        assert!(matches!(
            set.register_sample(sample("A", Some(1))),
            Err(RegistryError::ForwardReference { index: 1, parent: 1 })
        ));
    }

    #[test]
    fn lineage_walks_parents() {
        let mut set = SampleSet::new("p", "q", Strategy::SequentialRefine, 4);
        set.register_sample(sample("A", None)).unwrap();
        set.register_sample(sample("B", Some(0))).unwrap();
        set.register_sample(sample("C", Some(1))).unwrap();
        assert_eq!(set.lineage(2), vec!["A", "B", "C"]);
        assert_eq!(set.lineage(0), vec!["A"]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("prs".parse::<Strategy>().is_err());
    }

    #[test]
    fn decoding_defaults() {
        let d = DecodingParams::default();
        assert_eq!(d.temperature, 0.7);
        assert_eq!(d.top_p, 1.0);
    }
}
