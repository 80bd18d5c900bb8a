//! One generation step shared by every strategy: render, generate, score,
//! account.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{build_generator, render_prompt, whitespace_tokens, Generator, Templates, Throttle};
use crate::compute::{call_flops_with, BudgetLedger};
use crate::config::ValidatedRunConfig;
use crate::domain::{AgentSpec, DecodingParams, Sample, SampleSet, Strategy};
use crate::reward::{build_scorer, Scorer};
use crate::toa::{SearchTree, SimulationRecord};
use crate::{seed, Result};

/// A question to sample for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl Prompt {
    pub fn new(prompt_id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            question: question.into(),
            answer: None,
        }
    }
}

/// What a new sample is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum Context<'a> {
    Fresh,
    Refine(&'a Sample),
    /// Every output of the previous layer; `parent` is the lineage predecessor.
    Aggregate {
        priors: &'a [&'a Sample],
        parent: usize,
    },
}

pub struct Produced {
    pub sample: Sample,
    pub usage: BudgetLedger,
}

pub struct Agent {
    pub spec: AgentSpec,
    pub generator: Arc<dyn Generator>,
}

/// Agents, scorer and run-wide settings.
pub struct Orchestra {
    agents: Vec<Agent>,
    scorer: Arc<dyn Scorer>,
    reward_param_count: u64,
    templates: Templates,
    decoding: DecodingParams,
    master_seed: u64,
    flops_multiplier: f64,
}

impl Orchestra {
    pub fn from_config(cfg: &ValidatedRunConfig) -> Result<Self> {
        let raw = cfg.config();
        let throttle = Throttle::new(raw.max_concurrency);
        let mut agents = Vec::with_capacity(raw.agents.len());
        for spec in &raw.agents {
            let desc = &raw.backends[&spec.backend_ref];
            agents.push(Agent {
                spec: spec.clone(),
                generator: build_generator(desc, raw.testbed.as_ref(), throttle.clone())?,
            });
        }
        let reward_desc = &raw.reward_backends[&raw.reward_backend_ref];
        Ok(Self {
            agents,
            scorer: build_scorer(reward_desc, throttle)?,
            reward_param_count: reward_desc.param_count,
            templates: cfg.templates().clone(),
            decoding: raw.decoding.clone(),
            master_seed: raw.master_seed,
            flops_multiplier: raw.flops_multiplier,
        })
    }

    pub fn new(
        agents: Vec<Agent>,
        scorer: Arc<dyn Scorer>,
        templates: Templates,
        decoding: DecodingParams,
        master_seed: u64,
    ) -> Self {
        Self {
            agents,
            scorer,
            reward_param_count: 0,
            templates,
            decoding,
            master_seed,
            flops_multiplier: crate::compute::DEFAULT_FLOPS_MULTIPLIER,
        }
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn k(&self) -> usize {
        self.agents.len()
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.spec.agent_id.clone()).collect()
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Generates and scores the sample that will receive `sample_index`.
    pub fn produce(&self, prompt: &Prompt, sample_index: usize, agent: usize, ctx: Context<'_>) -> Result<Produced> {
        let a = &self.agents[agent];
        let (rendered, parent_index, moa_context_indices) = match ctx {
            Context::Fresh => (
                render_prompt(&self.templates.fresh, &prompt.question, &[])?,
                None,
                Vec::new(),
            ),
            Context::Refine(prior) => (
                render_prompt(&self.templates.refine_one, &prompt.question, &[prior.text.as_str()])?,
                Some(prior.sample_index),
                Vec::new(),
            ),
            Context::Aggregate { priors, parent } => {
                let texts: Vec<&str> = priors.iter().map(|s| s.text.as_str()).collect();
                (
                    render_prompt(&self.templates.aggregate_many, &prompt.question, &texts)?,
                    Some(parent),
                    priors.iter().map(|s| s.sample_index).collect(),
                )
            }
        };
        let call_seed = seed::call_seed(self.master_seed, &prompt.prompt_id, sample_index);
        let record = a
            .generator
            .generate(&a.spec, &rendered, &self.decoding.with_seed(call_seed))?;
        let reward = self.scorer.score(&prompt.question, &record.text)?;

        let mut usage = BudgetLedger::new();
        usage.record_generation(
            &a.spec.agent_id,
            call_flops_with(
                self.flops_multiplier,
                a.spec.param_count,
                record.prompt_tokens,
                record.completion_tokens,
            ),
            record.prompt_tokens,
            record.completion_tokens,
        );
        let reward_tokens = whitespace_tokens(&prompt.question) + whitespace_tokens(&record.text);
        usage.record_scoring(
            &a.spec.agent_id,
            call_flops_with(self.flops_multiplier, self.reward_param_count, reward_tokens, 0),
            reward_tokens,
        );

        Ok(Produced {
            sample: Sample {
                sample_index,
                text: record.text,
                agent_id: a.spec.agent_id.clone(),
                parent_index,
                moa_context_indices,
                reward: Some(reward),
                prompt_tokens: record.prompt_tokens,
                completion_tokens: record.completion_tokens,
                seed: call_seed,
            },
            usage,
        })
    }

    /// Runs independent steps concurrently and returns them in input order.
    pub(crate) fn produce_batch<'a>(
        &self,
        prompt: &Prompt,
        jobs: Vec<(usize, usize, Context<'a>)>,
    ) -> Result<Vec<Produced>> {
        jobs.into_par_iter()
            .map(|(index, agent, ctx)| self.produce(prompt, index, agent, ctx))
            .collect()
    }
}

/// Everything one strategy run leaves behind for a prompt.
#[derive(Debug, Clone)]
pub struct StrategyOutput {
    pub samples: SampleSet,
    pub ledger: BudgetLedger,
    /// Search tree and its simulation log (tree search only).
    pub tree: Option<SearchTree>,
}

impl StrategyOutput {
    pub fn simulations(&self) -> &[SimulationRecord] {
        self.tree.as_ref().map_or(&[], |t| t.simulations())
    }
}

/// Runs the configured strategy for one prompt.
pub fn run_strategy(orch: &Orchestra, cfg: &ValidatedRunConfig, prompt: &Prompt) -> Result<StrategyOutput> {
    use crate::samplers;
    let n = cfg.n();
    match cfg.strategy() {
        Strategy::RandomSingle => samplers::random_single(orch, prompt, cfg.single_agent(), n),
        Strategy::ParallelEnsemble => samplers::parallel_ensemble(orch, prompt, n),
        Strategy::SequentialRefine => samplers::sequential_refine(orch, prompt, n),
        Strategy::Moa => samplers::mixture_of_agents(orch, prompt, n, cfg.moa()),
        Strategy::Toa => crate::toa::run_toa(orch, prompt, cfg.toa()).map_err(|e| e.error),
    }
}
