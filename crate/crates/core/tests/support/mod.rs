//! Shared fixtures and independent checkers for the integration tests.
#![allow(dead_code)]

use rayon::prelude::*;
use toa_core::domain::SampleSet;
use toa_core::engine::run_strategy;
use toa_core::testbed::{LandscapeConfig, MockAgentParams};
use toa_core::toa::{run_toa, NodeId, NodeKind, RootMergeMode, SearchTree, ToaParams};
use toa_core::{validate_config, Orchestra, Prompt, RunConfig, Strategy, StrategyOutput};

pub const GRADED_MU: [f64; 4] = [0.45, 0.50, 0.55, 0.60];

/// Landscape with one agent per base quality, shared gain and noise.
pub fn landscape(mus: &[f64], gain: f64, noise: f64, same_agent_penalty: f64, affinity: bool) -> LandscapeConfig {
    let agents = mus
        .iter()
        .enumerate()
        .map(|(i, &mu)| MockAgentParams {
            agent_id: format!("M{i}"),
            base_quality: mu,
            refine_gain: gain,
            noise,
        })
        .collect();
    LandscapeConfig {
        prompt_affinity: affinity,
        ..LandscapeConfig::new(agents, same_agent_penalty)
    }
}

/// The ordering-experiment landscape: K=4 graded agents, β=0.5, σ=0.02, δ=0.1.
pub fn graded_landscape() -> LandscapeConfig {
    landscape(&GRADED_MU, 0.5, 0.02, 0.1, true)
}

pub fn prompts(count: usize) -> Vec<Prompt> {
    (0..count)
        .map(|i| {
            Prompt::new(
                format!("q{i:03}"),
                format!("Question {i}: describe case {i} in detail."),
            )
        })
        .collect()
}

pub fn config(lc: LandscapeConfig, n: usize, strategy: Strategy, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::mock(lc, n, strategy);
    cfg.master_seed = seed;
    cfg
}

/// Runs every prompt (prompts in parallel) and returns outputs in prompt order.
pub fn run_all(cfg: RunConfig, prompts: &[Prompt]) -> Vec<StrategyOutput> {
    let v = validate_config(cfg).expect("valid config");
    let orch = Orchestra::from_config(&v).expect("orchestra");
    prompts
        .par_iter()
        .map(|p| run_strategy(&orch, &v, p).expect("strategy run"))
        .collect()
}

/// Runs tree search directly, keeping partial output when the search runs
/// out of expandable nodes.
pub fn run_toa_lenient(cfg: RunConfig, prompt: &Prompt) -> (StrategyOutput, bool) {
    let v = validate_config(cfg).expect("valid config");
    let orch = Orchestra::from_config(&v).expect("orchestra");
    match run_toa(&orch, prompt, v.toa()) {
        Ok(out) => (out, true),
        Err(fail) => {
            assert!(
                matches!(
                    fail.error,
                    toa_core::Error::Search(toa_core::toa::SearchError::SearchExhausted { .. })
                ),
                "unexpected failure: {}",
                fail.error
            );
            (*fail.partial, false)
        }
    }
}

/// Mean of the `k` largest rewards, by sorting.
pub fn top_k(set: &SampleSet, k: usize) -> f64 {
    let mut r: Vec<f64> = set.samples.iter().map(|s| s.reward.unwrap()).collect();
    r.sort_by(|a, b| b.partial_cmp(a).unwrap());
    r[..k].iter().sum::<f64>() / k as f64
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn ucb(v: f64, n: u64, big_n: u64, alpha: f64) -> f64 {
    if n == 0 {
        f64::INFINITY
    } else {
        v / n as f64 + alpha * (2.0 * (big_n as f64).ln() / n as f64).sqrt()
    }
}

/// Summary of a successful replay.
#[derive(Debug, Default)]
pub struct ReplayReport {
    pub steps: usize,
    pub decisions: usize,
    pub inherited_nodes: usize,
}

/// Rebuilds the search from its simulation log alone and checks, at every
/// logged step, that each traversal decision is the UCB argmax over the
/// candidates a brute-force evaluation allows (top-`w` pruning, depth cap,
/// structural exhaustion), and that final `(v, n)` match the log exactly.
pub fn replay(tree: &SearchTree, p: &ToaParams) -> Result<ReplayReport, String> {
    let nodes = tree.nodes();
    let recs = tree.simulations();
    let total = nodes.len();
    let steps = recs.len();

    let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); total];
    for node in nodes {
        if let Some(parent) = node.parent_id {
            if parent >= node.node_id {
                return Err(format!("node {} precedes its parent", node.node_id));
            }
            children[parent].push(node.node_id);
        }
    }
    let mut depth = vec![0usize; total];
    for node in nodes {
        if let Some(parent) = node.parent_id {
            depth[node.node_id] = depth[parent] + usize::from(node.kind == NodeKind::Response);
        }
    }

    // Step at which each node comes into existence.
    let mut born = vec![steps; total];
    for node in nodes {
        match node.kind {
            NodeKind::Root => born[node.node_id] = 0,
            NodeKind::Response => born[node.node_id] = node.sample_index.unwrap(),
            NodeKind::Model => {}
        }
    }
    for &c in &children[0] {
        born[c] = 0;
    }
    for (t, rec) in recs.iter().enumerate() {
        for &id in &rec.path[..rec.path.len() - 1] {
            if nodes[id].kind == NodeKind::Response {
                for &c in &children[id] {
                    born[c] = born[c].min(t);
                }
            }
        }
    }

    let twin = |agent: &str| -> NodeId {
        *children[0]
            .iter()
            .find(|&&c| nodes[c].agent_id.as_deref() == Some(agent))
            .expect("root child for every agent")
    };

    let mut v = vec![0.0f64; total];
    let mut n = vec![0u64; total];
    let mut initialized = vec![false; total];
    let mut report = ReplayReport {
        steps,
        ..Default::default()
    };

    let init_born =
        |t: usize, v: &mut Vec<f64>, n: &mut Vec<u64>, initialized: &mut Vec<bool>, report: &mut ReplayReport| {
            for id in 0..total {
                if !initialized[id] && born[id] <= t {
                    initialized[id] = true;
                    if nodes[id].inherited_from_root {
                        let tw = twin(nodes[id].agent_id.as_deref().unwrap());
                        v[id] = v[tw];
                        n[id] = n[tw];
                        report.inherited_nodes += 1;
                    }
                }
            }
        };

    let terminal = |id: NodeId| p.max_depth.is_some_and(|d| depth[id] >= d);

    for (t, rec) in recs.iter().enumerate() {
        init_born(t, &mut v, &mut n, &mut initialized, &mut report);
        let exists = |id: NodeId| born[id] <= t && !(nodes[id].kind == NodeKind::Response && born[id] >= t);
        let kids = |id: NodeId| -> Vec<NodeId> { children[id].iter().copied().filter(|&c| exists(c)).collect() };
        let retained = |id: NodeId| -> Vec<NodeId> {
            let mut ks = kids(id);
            ks.sort_by(|&a, &b| {
                nodes[b]
                    .reward
                    .unwrap()
                    .partial_cmp(&nodes[a].reward.unwrap())
                    .unwrap()
                    .then(nodes[a].sample_index.cmp(&nodes[b].sample_index))
            });
            ks.truncate(p.max_width);
            ks.sort();
            ks
        };

        // Structural liveness, children before parents.
        let mut alive = vec![false; total];
        for id in (0..total).rev() {
            if !exists(id) {
                continue;
            }
            alive[id] = match nodes[id].kind {
                NodeKind::Root => kids(id).iter().any(|&c| alive[c]),
                NodeKind::Response => {
                    let ks = kids(id);
                    ks.is_empty() || ks.iter().any(|&c| alive[c])
                }
                NodeKind::Model => {
                    let ks = kids(id);
                    ks.is_empty() || retained(id).iter().any(|&c| !terminal(c) && alive[c]) || ks.len() < p.max_width
                }
            };
        }

        let path = &rec.path;
        let last = *path.last().unwrap();
        if nodes[last].kind != NodeKind::Response || nodes[last].sample_index != Some(t) {
            return Err(format!("step {t}: log does not end at response {t}"));
        }
        if path[0] != 0 {
            return Err(format!("step {t}: path does not start at root"));
        }
        for i in 0..path.len() - 1 {
            let (cur, next) = (path[i], path[i + 1]);
            if nodes[next].parent_id != Some(cur) {
                return Err(format!("step {t}: {next} is not a child of {cur}"));
            }
            let big_n = if p.ucb_parent_visits { n[cur].max(1) } else { p.n as u64 };
            let argmax = |cands: &[NodeId]| -> Option<NodeId> {
                let mut best: Option<(NodeId, f64)> = None;
                for &c in cands {
                    let s = ucb(v[c], n[c], big_n, p.alpha);
                    if best.is_none() || s > best.unwrap().1 {
                        best = Some((c, s));
                    }
                }
                best.map(|b| b.0)
            };
            match nodes[cur].kind {
                NodeKind::Root | NodeKind::Response => {
                    if nodes[cur].kind == NodeKind::Response && terminal(cur) {
                        return Err(format!("step {t}: descended below depth cap at {cur}"));
                    }
                    let cands: Vec<NodeId> = kids(cur).into_iter().filter(|&c| alive[c]).collect();
                    if argmax(&cands) != Some(next) {
                        return Err(format!(
                            "step {t}: chose {next} under {cur}, brute force says {:?}",
                            argmax(&cands)
                        ));
                    }
                    report.decisions += 1;
                }
                NodeKind::Model if i + 1 == path.len() - 1 => {
                    let ks = kids(cur);
                    let open = retained(cur).into_iter().any(|c| !terminal(c) && alive[c]);
                    if !(ks.is_empty() || (!open && ks.len() < p.max_width)) {
                        return Err(format!("step {t}: generated at {cur} while it was not expandable"));
                    }
                    report.decisions += 1;
                }
                NodeKind::Model => {
                    let cands: Vec<NodeId> = retained(cur)
                        .into_iter()
                        .filter(|&c| !terminal(c) && alive[c])
                        .collect();
                    if argmax(&cands) != Some(next) {
                        return Err(format!(
                            "step {t}: chose {next} under model {cur}, brute force says {:?}",
                            argmax(&cands)
                        ));
                    }
                    report.decisions += 1;
                }
            }
        }
        for &id in path {
            v[id] += rec.reward;
            n[id] += 1;
        }
    }
    init_born(steps, &mut v, &mut n, &mut initialized, &mut report);

    for node in nodes {
        let id = node.node_id;
        if node.v != v[id] || node.n != n[id] {
            return Err(format!(
                "node {id}: stored ({}, {}) but log gives ({}, {})",
                node.v, node.n, v[id], n[id]
            ));
        }
    }
    Ok(report)
}

/// Static shape checks on a tree and its sample set.
pub fn check_structure(tree: &SearchTree, set: &SampleSet, p: &ToaParams) -> Result<(), String> {
    let nodes = tree.nodes();
    let k = tree.k();
    let root = &nodes[0];
    if root.kind != NodeKind::Root || root.parent_id.is_some() {
        return Err("node 0 is not a parentless root".into());
    }
    let root_kids: Vec<&str> = tree
        .children(0)
        .iter()
        .map(|&c| nodes[c].agent_id.as_deref().unwrap())
        .collect();
    if root_kids != tree.agents().iter().map(String::as_str).collect::<Vec<_>>() {
        return Err("root does not hold one child per agent".into());
    }
    let mut seen_index = vec![false; set.len()];
    for node in nodes {
        let parent = node.parent_id.map(|p| &nodes[p]);
        match node.kind {
            NodeKind::Root => {
                if node.node_id != 0 {
                    return Err(format!("second root {}", node.node_id));
                }
            }
            NodeKind::Model => {
                let pk = parent.unwrap().kind;
                if pk == NodeKind::Model {
                    return Err(format!("model {} under a model", node.node_id));
                }
                let responses = tree.children(node.node_id);
                if responses.len() > p.max_width {
                    return Err(format!(
                        "model {} holds {} > w responses",
                        node.node_id,
                        responses.len()
                    ));
                }
                if responses.iter().any(|&r| nodes[r].kind != NodeKind::Response) {
                    return Err(format!("model {} has a non-response child", node.node_id));
                }
                if node.n == 0 && node.v != 0.0 {
                    return Err(format!("model {} has v without visits", node.node_id));
                }
            }
            NodeKind::Response => {
                if parent.unwrap().kind != NodeKind::Model {
                    return Err(format!("response {} not under a model", node.node_id));
                }
                let kids = tree.children(node.node_id);
                for inherited in [false, true] {
                    let mut agents: Vec<&str> = kids
                        .iter()
                        .filter(|&&c| nodes[c].inherited_from_root == inherited)
                        .map(|&c| nodes[c].agent_id.as_deref().unwrap())
                        .collect();
                    let count = agents.len();
                    agents.sort();
                    agents.dedup();
                    if count > k || agents.len() != count || (count != 0 && count != k) {
                        return Err(format!("response {} has a malformed child layer", node.node_id));
                    }
                }
                let idx = node.sample_index.unwrap();
                if idx >= set.len() || std::mem::replace(&mut seen_index[idx], true) {
                    return Err(format!("response {} has a bad sample index", node.node_id));
                }
                let model = parent.unwrap();
                let sample = &set.samples[idx];
                if Some(sample.agent_id.as_str()) != model.agent_id.as_deref() {
                    return Err(format!("sample {idx} agent differs from its model node"));
                }
                let expected_parent = if tree.refines_parent(model.node_id) {
                    nodes[model.parent_id.unwrap()].sample_index
                } else {
                    None
                };
                if sample.parent_index != expected_parent {
                    return Err(format!(
                        "sample {idx} parent {:?} != {:?}",
                        sample.parent_index, expected_parent
                    ));
                }
                if sample.reward != node.reward {
                    return Err(format!("sample {idx} reward differs from its node"));
                }
                let refines = model.parent_id.map(|p| nodes[p].kind) == Some(NodeKind::Response)
                    && (!model.inherited_from_root || tree.merge_mode() == RootMergeMode::Refine);
                if refines != tree.refines_parent(model.node_id) {
                    return Err(format!("model {} refinement flag inconsistent", model.node_id));
                }
            }
        }
    }
    if tree.response_count() != set.len() || seen_index.iter().any(|s| !s) {
        return Err("response nodes and samples are not in bijection".into());
    }
    Ok(())
}
