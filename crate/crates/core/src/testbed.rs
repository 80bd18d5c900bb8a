//! Synthetic agent/reward landscape for offline runs.
//!
//! Each mock agent has a base quality, a refinement gain and a noise level.
//! Fresh samples land near the base quality; a refinement closes a fraction
//! of the gap to the quality cap, and closes less of it when an agent
//! refines its own output. Mock texts start with a self-describing header
//! token so rewards and lineage can be recovered from the text alone.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backends::{whitespace_tokens, BackendError, GenerationRecord, Generator};
use crate::domain::{AgentSpec, DecodingParams};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockAgentParams {
    pub agent_id: String,
    /// μ, in [0, 1].
    pub base_quality: f64,
    /// β, in [0, 1].
    pub refine_gain: f64,
    /// σ of the per-sample quality noise.
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    pub agents: Vec<MockAgentParams>,
    /// δ: fraction of the refinement gain lost when an agent refines itself.
    #[serde(default)]
    pub cross_model_bonus: f64,
    #[serde(default = "default_cap")]
    pub quality_cap: f64,
    /// Permute base qualities across agents per prompt, so no single agent
    /// is best on every prompt.
    #[serde(default)]
    pub prompt_affinity: bool,
}

fn default_cap() -> f64 {
    1.0
}

impl LandscapeConfig {
    /// Cap 1.0, no prompt affinity.
    pub fn new(agents: Vec<MockAgentParams>, cross_model_bonus: f64) -> Self {
        Self {
            agents,
            cross_model_bonus,
            quality_cap: 1.0,
            prompt_affinity: false,
        }
    }

    pub fn agent(&self, agent_id: &str) -> Option<&MockAgentParams> {
        self.agents.iter().find(|a| a.agent_id == agent_id)
    }

    /// Agent parameters as seen on the prompt identified by `topic`.
    pub fn effective_params(&self, agent_id: &str, topic: u64) -> Option<MockAgentParams> {
        let pos = self.agents.iter().position(|a| a.agent_id == agent_id)?;
        let mut params = self.agents[pos].clone();
        if self.prompt_affinity {
            let mut order: Vec<usize> = (0..self.agents.len()).collect();
            order.shuffle(&mut seed::rng(seed::mix(&[topic, 0xAFF1])));
            params.base_quality = self.agents[order[pos]].base_quality;
        }
        Some(params)
    }

    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.cross_model_bonus < 0.0 || !self.cross_model_bonus.is_finite() {
            problems.push("cross_model_bonus must be a nonnegative number".to_string());
        }
        if !self.quality_cap.is_finite() || self.quality_cap <= 0.0 {
            problems.push("quality_cap must be positive".to_string());
        }
        for a in &self.agents {
            if !(0.0..=1.0).contains(&a.base_quality) {
                problems.push(format!("agent `{}`: base_quality must lie in [0, 1]", a.agent_id));
            }
            if !(0.0..=1.0).contains(&a.refine_gain) {
                problems.push(format!("agent `{}`: refine_gain must lie in [0, 1]", a.agent_id));
            }
            if !a.noise.is_finite() || a.noise < 0.0 {
                problems.push(format!("agent `{}`: noise must be nonnegative", a.agent_id));
            }
        }
        problems
    }
}

/// Quality and author of the response being refined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParentQuality<'a> {
    pub quality: f64,
    pub agent_id: &'a str,
}

fn gaussian(sigma: f64, rng_seed: u64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    normal.sample(&mut seed::rng(rng_seed))
}

/// Latent quality of a new sample.
///
/// Fresh: `μ + ε`. Refinement: `base + β·(cap − base)·g + ε` with
/// `base = max(parent, μ)` and `g = 1 − δ` when the agent refines its own
/// output, `1` otherwise. Clipped to `[0, cap]`.
pub fn mock_quality(
    lc: &LandscapeConfig,
    a: &MockAgentParams,
    parent: Option<ParentQuality<'_>>,
    rng_seed: u64,
) -> f64 {
    let eps = gaussian(a.noise, rng_seed);
    let q = match parent {
        None => a.base_quality + eps,
        Some(p) => {
            let base = p.quality.max(a.base_quality);
            let g = if p.agent_id == a.agent_id {
                1.0 - lc.cross_model_bonus
            } else {
                1.0
            };
            base + a.refine_gain * (lc.quality_cap - base) * g + eps
        }
    };
    q.clamp(0.0, lc.quality_cap)
}

/// Reward of a sample with latent `quality`: `quality + ζ`, `ζ ~ N(0, noise²)`.
pub fn mock_reward(quality: f64, reward_noise: f64, rng_seed: u64) -> f64 {
    quality + gaussian(reward_noise, rng_seed)
}

/// The leading token of every mock response.
#[derive(Debug, Clone, PartialEq)]
pub struct MockHeader {
    pub agent_id: String,
    pub quality: f64,
    /// Agents along the refinement lineage, oldest first; ends with `agent_id`.
    pub lineage: Vec<String>,
    /// Identifies the prompt the lineage started from.
    pub topic: u64,
}

const HEADER_OPEN: &str = "[[mock|";
const HEADER_CLOSE: &str = "]]";

impl MockHeader {
    pub fn render(&self) -> String {
        format!(
            "{HEADER_OPEN}agent={}|q={}|lineage={}|topic={:016x}{HEADER_CLOSE}",
            self.agent_id,
            self.quality,
            self.lineage.join(">"),
            self.topic
        )
    }

    /// Parses a header from the start of `text`.
    pub fn parse_prefix(text: &str) -> Option<Self> {
        let body = text.strip_prefix(HEADER_OPEN)?;
        let end = body.find(HEADER_CLOSE)?;
        Self::parse_fields(&body[..end])
    }

    /// Every header appearing anywhere in `text`, in order.
    pub fn find_all(text: &str) -> Vec<Self> {
        let mut found = Vec::new();
        let mut rest = text;
        while let Some(at) = rest.find(HEADER_OPEN) {
            rest = &rest[at..];
            if let Some(h) = Self::parse_prefix(rest) {
                found.push(h)
            }
            rest = &rest[HEADER_OPEN.len()..];
        }
        found
    }

    fn parse_fields(fields: &str) -> Option<Self> {
        let (mut agent, mut quality, mut lineage, mut topic) = (None, None, None, None);
        for field in fields.split('|') {
            let (key, value) = field.split_once('=')?;
            match key {
                "agent" => agent = Some(value.to_string()),
                "q" => quality = value.parse::<f64>().ok().filter(|q| q.is_finite()),
                "lineage" => lineage = Some(value.split('>').map(str::to_string).collect()),
                "topic" => topic = u64::from_str_radix(value, 16).ok(),
                _ => return None,
            }
        }
        Some(Self {
            agent_id: agent?,
            quality: quality?,
            lineage: lineage?,
            topic: topic?,
        })
    }
}

/// Returns `true` when `agent_id` can be embedded in a mock header.
pub fn valid_mock_agent_id(agent_id: &str) -> bool {
    !agent_id.is_empty()
        && agent_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
}

const VOCAB: [&str; 24] = [
    "answer",
    "because",
    "therefore",
    "consider",
    "first",
    "then",
    "result",
    "value",
    "step",
    "check",
    "assume",
    "hence",
    "note",
    "case",
    "so",
    "thus",
    "given",
    "each",
    "term",
    "sum",
    "final",
    "show",
    "which",
    "gives",
];

/// Deterministic generator over a [`LandscapeConfig`].
///
/// The output depends only on the agent, the rendered prompt and the seed.
/// Priors embedded in the prompt are recognized by their headers; with
/// several priors the highest-quality one (first on ties) is the parent.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    landscape: LandscapeConfig,
}

impl MockGenerator {
    pub fn new(landscape: LandscapeConfig) -> Self {
        Self { landscape }
    }
}

impl Generator for MockGenerator {
    fn generate(
        &self,
        agent: &AgentSpec,
        rendered_prompt: &str,
        d: &DecodingParams,
    ) -> Result<GenerationRecord, BackendError> {
        let priors = MockHeader::find_all(rendered_prompt);
        let parent = priors.iter().fold(None::<&MockHeader>, |best, h| match best {
            Some(b) if b.quality >= h.quality => Some(b),
            _ => Some(h),
        });
        let topic = parent.map_or_else(|| seed::hash_str(rendered_prompt), |p| p.topic);
        let params = self
            .landscape
            .effective_params(&agent.agent_id, topic)
            .ok_or_else(|| BackendError::Mock {
                agent_id: agent.agent_id.clone(),
                reason: "agent is not listed in the testbed landscape".into(),
            })?;
        if !valid_mock_agent_id(&agent.agent_id) {
            return Err(BackendError::Mock {
                agent_id: agent.agent_id.clone(),
                reason: "agent id must be ASCII alphanumerics or one of `_-.:`".into(),
            });
        }

        let call_seed = seed::mix(&[seed::hash_str(&agent.agent_id), seed::hash_str(rendered_prompt), d.seed]);
        let quality = mock_quality(
            &self.landscape,
            &params,
            parent.map(|p| ParentQuality {
                quality: p.quality,
                agent_id: &p.agent_id,
            }),
            call_seed,
        );
        let mut lineage = parent.map(|p| p.lineage.clone()).unwrap_or_default();
        lineage.push(agent.agent_id.clone());
        let header = MockHeader {
            agent_id: agent.agent_id.clone(),
            quality,
            lineage,
            topic,
        };

        let mut rng = seed::rng(seed::mix(&[call_seed, 0xB0D7]));
        let budget = d.max_tokens.max(1) as usize - 1;
        let words = rand::Rng::random_range(&mut rng, 12..=40usize).min(budget);
        let mut text = header.render();
        for _ in 0..words {
            text.push(' ');
            text.push_str(VOCAB[rand::Rng::random_range(&mut rng, 0..VOCAB.len())]);
        }

        Ok(GenerationRecord {
            prompt_tokens: whitespace_tokens(rendered_prompt),
            completion_tokens: whitespace_tokens(&text),
            text,
            agent_id: agent.agent_id.clone(),
            latency_ms: 0.0,
            attempt: 1,
        })
    }
}
