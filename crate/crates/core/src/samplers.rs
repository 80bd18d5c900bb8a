//! Fixed-structure coordination strategies.
//!
//! Sample indices are assigned up front so each call's seed is known before
//! it runs; calls that do not depend on each other run concurrently and are
//! registered in index order.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::compute::BudgetLedger;
use crate::domain::{SampleSet, Strategy};
use crate::engine::{Context, Orchestra, Produced, Prompt, StrategyOutput};
use crate::{seed, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoaParams {
    /// Layers per pass, `L ≥ 1`.
    pub num_layers: usize,
    pub aggregate_template_ref: String,
}

impl Default for MoaParams {
    fn default() -> Self {
        Self {
            num_layers: crate::config::DEFAULT_MOA_LAYERS,
            aggregate_template_ref: "aggregate".into(),
        }
    }
}

fn register_all(set: &mut SampleSet, ledger: &mut BudgetLedger, produced: Vec<Produced>) -> Result<()> {
    for p in produced {
        let expected = p.sample.sample_index;
        let index = set.register_sample(p.sample)?;
        debug_assert_eq!(index, expected);
        ledger.merge(&p.usage);
    }
    Ok(())
}

fn output(samples: SampleSet, ledger: BudgetLedger) -> Result<StrategyOutput> {
    Ok(StrategyOutput {
        samples,
        ledger,
        tree: None,
    })
}

/// `n` independent fresh samples from one agent.
pub fn random_single(orch: &Orchestra, prompt: &Prompt, agent: usize, n: usize) -> Result<StrategyOutput> {
    let mut set = SampleSet::new(&prompt.prompt_id, &prompt.question, Strategy::RandomSingle, n);
    let mut ledger = BudgetLedger::new();
    let jobs = (0..n).map(|i| (i, agent, Context::Fresh)).collect();
    register_all(&mut set, &mut ledger, orch.produce_batch(prompt, jobs)?)?;
    output(set, ledger)
}

/// `n / K` fresh samples per agent, interleaved round-robin so that any
/// prefix of the set stays balanced across agents.
pub fn parallel_ensemble(orch: &Orchestra, prompt: &Prompt, n: usize) -> Result<StrategyOutput> {
    let k = orch.k();
    assert!(
        k > 0 && n.is_multiple_of(k),
        "parallel_ensemble needs K | N (validated config)"
    );
    let mut set = SampleSet::new(&prompt.prompt_id, &prompt.question, Strategy::ParallelEnsemble, n);
    let mut ledger = BudgetLedger::new();
    let jobs = (0..n).map(|i| (i, i % k, Context::Fresh)).collect();
    register_all(&mut set, &mut ledger, orch.produce_batch(prompt, jobs)?)?;
    output(set, ledger)
}

/// Agent order of one refinement chain: a seeded uniform permutation.
pub fn chain_order(master_seed: u64, prompt_id: &str, chain: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut seed::rng(seed::chain_seed(master_seed, prompt_id, chain)));
    order
}

/// `n / K` chains, each visiting every agent once in its own random order;
/// every step after the first refines the chain's previous sample.
///
/// Chains advance in lockstep: step `s` of chain `c` gets index
/// `s · chains + c`.
pub fn sequential_refine(orch: &Orchestra, prompt: &Prompt, n: usize) -> Result<StrategyOutput> {
    let k = orch.k();
    assert!(
        k > 0 && n.is_multiple_of(k),
        "sequential_refine needs K | N (validated config)"
    );
    let chains = n / k;
    let orders: Vec<Vec<usize>> = (0..chains)
        .map(|c| chain_order(orch.master_seed(), &prompt.prompt_id, c, k))
        .collect();
    let mut set = SampleSet::new(&prompt.prompt_id, &prompt.question, Strategy::SequentialRefine, n);
    let mut ledger = BudgetLedger::new();
    for step in 0..k {
        let produced = {
            let jobs = orders
                .iter()
                .enumerate()
                .map(|(c, order)| {
                    let ctx = match step {
                        0 => Context::Fresh,
                        _ => Context::Refine(&set.samples[(step - 1) * chains + c]),
                    };
                    (step * chains + c, order[step], ctx)
                })
                .collect();
            orch.produce_batch(prompt, jobs)?
        };
        register_all(&mut set, &mut ledger, produced)?;
    }
    output(set, ledger)
}

/// Layered aggregation. Each pass starts with `K` fresh samples; in every
/// later layer agent `k` aggregates all `K` outputs of the previous layer.
/// Passes repeat, layer by layer, until `n` samples exist.
///
/// `parent_index` of an aggregated sample is the same agent's output in the
/// previous layer; the full context is in `moa_context_indices`.
pub fn mixture_of_agents(orch: &Orchestra, prompt: &Prompt, n: usize, p: &MoaParams) -> Result<StrategyOutput> {
    let k = orch.k();
    assert!(
        k > 0 && n.is_multiple_of(k),
        "mixture_of_agents needs N to be a multiple of K (validated config)"
    );
    assert!(p.num_layers >= 1);
    let mut set = SampleSet::new(&prompt.prompt_id, &prompt.question, Strategy::Moa, n);
    let mut ledger = BudgetLedger::new();
    let mut layer = 0usize;
    while set.len() < n {
        let base = set.len();
        let produced = if layer == 0 {
            orch.produce_batch(prompt, (0..k).map(|a| (base + a, a, Context::Fresh)).collect())?
        } else {
            let priors: Vec<_> = set.samples[base - k..base].iter().collect();
            let jobs = (0..k)
                .map(|a| {
                    let ctx = Context::Aggregate {
                        priors: &priors,
                        parent: base - k + a,
                    };
                    (base + a, a, ctx)
                })
                .collect();
            orch.produce_batch(prompt, jobs)?
        };
        register_all(&mut set, &mut ledger, produced)?;
        layer = (layer + 1) % p.num_layers;
    }
    output(set, ledger)
}

/// Layer (0-based, within its pass) of every MoA sample index.
pub fn moa_layer_of(index: usize, k: usize, num_layers: usize) -> usize {
    (index / k) % num_layers
}
