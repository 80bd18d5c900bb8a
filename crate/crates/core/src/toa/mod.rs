//! Reward-guided Monte Carlo tree search over agents and responses.
//!
//! The tree alternates model and response layers below the root. Each
//! cycle selects a model node by UCB, generates one response with that
//! node's agent (refining the parent response when there is one), scores
//! it, and backs the reward up to the root. The loop stops once `N`
//! responses exist.
//!
//! Expansion rules:
//!
//! - A response node, when first reached, gets one refining model child
//!   per agent (unvisited), followed by one merged child per agent that
//!   copies the current `(v, n)` of the root's child for that agent. Under
//!   [`RootMergeMode::Fresh`] merged children generate without context.
//! - A model node is generated from while it has no response child. Once it
//!   has one, selection descends into its top-`w` response children by
//!   reward. It widens again only when none of those can be descended into
//!   (terminal at `max_depth`, or exhausted), up to `w` children.
//!
//! UCB is `v/n + α·√(2·ln N / n)` with `N` the response budget; unvisited
//! nodes score `+∞` and ties go to the lowest node id.

mod tree;

pub use tree::{Node, NodeId, NodeKind, SearchTree, SimulationRecord, TreeSnapshot};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute::BudgetLedger;
use crate::domain::{SampleSet, Strategy};
use crate::engine::{Context, Orchestra, Prompt, StrategyOutput};
use crate::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootMergeMode {
    /// Merged model nodes generate without refinement context.
    #[default]
    Fresh,
    /// Merged model nodes refine their parent response like the others.
    Refine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToaParams {
    pub alpha: f64,
    /// `w`: response children retained (and allowed) per model node.
    pub max_width: usize,
    /// Deepest response layer; unlimited when absent.
    pub max_depth: Option<usize>,
    pub root_merge_mode: RootMergeMode,
    /// Response budget `N`.
    pub n: usize,
    /// Classical UCT: use the parent's visit count instead of `N`.
    #[serde(default)]
    pub ucb_parent_visits: bool,
}

impl ToaParams {
    /// Defaults for budget `n`: `α = 0.01`, `w = max(1, ⌊n/3⌋)`.
    pub fn for_budget(n: usize) -> Self {
        Self {
            alpha: crate::config::DEFAULT_ALPHA,
            max_width: (n / 3).max(1),
            max_depth: None,
            root_merge_mode: RootMergeMode::Fresh,
            n,
            ucb_parent_visits: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("search exhausted after {responses} of {budget} responses; raise max_width or max_depth")]
    SearchExhausted { responses: usize, budget: usize },
    #[error("response node {0} is already expanded")]
    AlreadyExpanded(NodeId),
    #[error("model node {node} already holds {width} responses")]
    WidthExceeded { node: NodeId, width: usize },
    #[error("response budget of {budget} already reached")]
    BudgetExhausted { budget: usize },
    #[error("node {node} is not a {expected} node")]
    WrongKind { node: NodeId, expected: &'static str },
}

/// `v/n + α·√(2·ln N / n)`, or `+∞` for an unvisited node.
pub fn ucb_score(v: f64, n: u64, big_n: u64, alpha: f64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let n = n as f64;
    v / n + alpha * (2.0 * (big_n as f64).ln() / n).sqrt()
}

/// The model node chosen for the next generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub model_node: NodeId,
    /// Sample the new response refines, when it refines one.
    pub refine_context: Option<usize>,
    /// Root first, `model_node` last.
    pub path: Vec<NodeId>,
}

fn node_ucb(tree: &SearchTree, parent: NodeId, child: NodeId, p: &ToaParams) -> f64 {
    let c = tree.node(child);
    let big_n = if p.ucb_parent_visits {
        tree.node(parent).n.max(1)
    } else {
        p.n as u64
    };
    ucb_score(c.v, c.n, big_n, p.alpha)
}

/// First candidate with maximal UCB; candidates must be in id order.
fn argmax_ucb(tree: &SearchTree, parent: NodeId, candidates: &[NodeId], p: &ToaParams) -> Option<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for &c in candidates {
        let score = node_ucb(tree, parent, c, p);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((c, score));
        }
    }
    best.map(|(c, _)| c)
}

/// Top-`w` response children of a model node by reward (ties: earlier
/// sample first), returned in id order. Nothing is deleted.
pub fn retained_children(tree: &SearchTree, model: NodeId, w: usize) -> Vec<NodeId> {
    let mut kids = tree.children(model).to_vec();
    kids.sort_by(|&a, &b| {
        let (na, nb) = (tree.node(a), tree.node(b));
        nb.reward
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&na.reward.unwrap_or(f64::NEG_INFINITY))
            .then(na.sample_index.cmp(&nb.sample_index))
    });
    kids.truncate(w);
    kids.sort_unstable();
    kids
}

fn is_terminal(tree: &SearchTree, response: NodeId, p: &ToaParams) -> bool {
    p.max_depth.is_some_and(|d| tree.node(response).depth >= d)
}

/// Creates the children of a freshly reached response node: one refining
/// model node per agent, then one merged node per agent inheriting the
/// root child's current `(v, n)`. Returns the new ids.
pub fn expand_response_node(tree: &mut SearchTree, response: NodeId) -> Result<Vec<NodeId>, SearchError> {
    if tree.node(response).kind != NodeKind::Response {
        return Err(SearchError::WrongKind {
            node: response,
            expected: "response",
        });
    }
    if !tree.children(response).is_empty() {
        return Err(SearchError::AlreadyExpanded(response));
    }
    let k = tree.k();
    let mut ids = Vec::with_capacity(2 * k);
    for agent in 0..k {
        ids.push(tree.add_model_node(response, agent, false));
    }
    for agent in 0..k {
        ids.push(tree.add_model_node(response, agent, true));
    }
    Ok(ids)
}

/// Walks down from the root by UCB to the model node that generates next,
/// expanding any unexpanded response node on the way.
pub fn select_action(tree: &mut SearchTree, p: &ToaParams) -> Result<Selection, SearchError> {
    'restart: loop {
        if tree.is_exhausted(SearchTree::ROOT) {
            return Err(SearchError::SearchExhausted {
                responses: tree.response_count(),
                budget: p.n,
            });
        }
        let mut path = vec![SearchTree::ROOT];
        let mut cur = SearchTree::ROOT;
        loop {
            match tree.node(cur).kind {
                NodeKind::Root | NodeKind::Response => {
                    if tree.node(cur).kind == NodeKind::Response && tree.children(cur).is_empty() {
                        expand_response_node(tree, cur)?;
                    }
                    let open: Vec<NodeId> = tree
                        .children(cur)
                        .iter()
                        .copied()
                        .filter(|&c| !tree.is_exhausted(c))
                        .collect();
                    match argmax_ucb(tree, cur, &open, p) {
                        Some(next) => {
                            path.push(next);
                            cur = next;
                        }
                        None => {
                            tree.mark_exhausted(cur);
                            continue 'restart;
                        }
                    }
                }
                NodeKind::Model => {
                    let count = tree.children(cur).len();
                    if count == 0 {
                        return Ok(selection(tree, cur, path));
                    }
                    let open: Vec<NodeId> = retained_children(tree, cur, p.max_width)
                        .into_iter()
                        .filter(|&r| !is_terminal(tree, r, p) && !tree.is_exhausted(r))
                        .collect();
                    if let Some(next) = argmax_ucb(tree, cur, &open, p) {
                        path.push(next);
                        cur = next;
                    } else if count < p.max_width {
                        return Ok(selection(tree, cur, path));
                    } else {
                        tree.mark_exhausted(cur);
                        continue 'restart;
                    }
                }
            }
        }
    }
}

fn selection(tree: &SearchTree, model: NodeId, path: Vec<NodeId>) -> Selection {
    let refine_context = if tree.refines_parent(model) {
        let parent = tree.parent(model).expect("refining nodes have a parent");
        tree.node(parent).sample_index
    } else {
        None
    };
    Selection {
        model_node: model,
        refine_context,
        path,
    }
}

/// Generates one response from `model`, registers and scores it, and hangs
/// it under `model`. Returns the new node and its reward.
pub fn expand_model_node(
    tree: &mut SearchTree,
    model: NodeId,
    orch: &Orchestra,
    prompt: &Prompt,
    set: &mut SampleSet,
    ledger: &mut BudgetLedger,
    p: &ToaParams,
) -> Result<(NodeId, f64), Error> {
    let node = tree.node(model);
    if node.kind != NodeKind::Model {
        return Err(SearchError::WrongKind {
            node: model,
            expected: "model",
        }
        .into());
    }
    if node.children_ids.len() >= p.max_width {
        return Err(SearchError::WidthExceeded {
            node: model,
            width: p.max_width,
        }
        .into());
    }
    if tree.response_count() >= p.n || set.len() >= set.capacity {
        return Err(SearchError::BudgetExhausted { budget: p.n }.into());
    }
    let agent = tree
        .agent_index(node.agent_id.as_deref().expect("model nodes carry an agent"))
        .expect("tree agents match the orchestra");
    let ctx = match selection(tree, model, Vec::new()).refine_context {
        Some(idx) => Context::Refine(&set.samples[idx]),
        None => Context::Fresh,
    };
    let produced = orch.produce(prompt, set.next_index(), agent, ctx)?;
    let reward = produced.sample.reward.expect("produced samples are scored");
    let index = set.register_sample(produced.sample)?;
    ledger.merge(&produced.usage);
    Ok((tree.add_response(model, index, reward), reward))
}

/// Adds `r` to `v` and one to `n` on every node from `response` up to the root.
pub fn backpropagate(tree: &mut SearchTree, response: NodeId, r: f64) {
    let mut cur = Some(response);
    while let Some(id) = cur {
        let node = tree.node_mut(id);
        node.v += r;
        node.n += 1;
        cur = node.parent_id;
    }
}

/// A failed search together with everything produced before the failure.
#[derive(Debug)]
pub struct ToaFailure {
    pub error: Error,
    pub partial: Box<StrategyOutput>,
}

/// Runs select → expand → simulate → backpropagate until `p.n` responses exist.
pub fn run_toa(orch: &Orchestra, prompt: &Prompt, p: &ToaParams) -> Result<StrategyOutput, ToaFailure> {
    let mut tree = SearchTree::new(orch.agent_ids(), p.root_merge_mode);
    let mut set = SampleSet::new(&prompt.prompt_id, &prompt.question, Strategy::Toa, p.n);
    let mut ledger = BudgetLedger::new();

    let step = |tree: &mut SearchTree, set: &mut SampleSet, ledger: &mut BudgetLedger| -> Result<(), Error> {
        let sel = select_action(tree, p)?;
        let (response, reward) = expand_model_node(tree, sel.model_node, orch, prompt, set, ledger, p)?;
        backpropagate(tree, response, reward);
        let mut path = sel.path;
        path.push(response);
        tree.log_simulation(SimulationRecord { path, reward });
        Ok(())
    };

    while tree.response_count() < p.n {
        if let Err(error) = step(&mut tree, &mut set, &mut ledger) {
            return Err(ToaFailure {
                error,
                partial: Box::new(StrategyOutput {
                    samples: set,
                    ledger,
                    tree: Some(tree),
                }),
            });
        }
    }
    Ok(StrategyOutput {
        samples: set,
        ledger,
        tree: Some(tree),
    })
}
