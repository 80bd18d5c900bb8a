//! Best-of-N selection and workflow analyses over finished runs.
//!
//! Everything here is a pure function of a [`SampleSet`] or a
//! [`SearchTree`]. Cross-prompt aggregates average per-prompt values
//! (for layer statistics: the mean of per-prompt maxima).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{Sample, SampleSet};
use crate::toa::{NodeId, NodeKind, SearchTree};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("sample set is empty")]
    EmptySet,
    #[error("asked for {k} samples but only {n} exist")]
    KTooLarge { k: usize, n: usize },
    #[error("sample {0} has no reward")]
    Unscored(usize),
    #[error("no sample yielded an extractable answer")]
    NoExtractableAnswer,
    #[error("tree has no response nodes")]
    EmptyTree,
}

fn reward_of(s: &Sample) -> Result<f64, AnalysisError> {
    s.reward.ok_or(AnalysisError::Unscored(s.sample_index))
}

/// Highest-reward sample; ties go to the lowest sample index.
pub fn best_of_n(set: &SampleSet) -> Result<&Sample, AnalysisError> {
    let mut best: Option<(&Sample, f64)> = None;
    for s in &set.samples {
        let r = reward_of(s)?;
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((s, r));
        }
    }
    best.map(|(s, _)| s).ok_or(AnalysisError::EmptySet)
}

/// Mean of the `k` largest rewards.
pub fn top_k_mean(set: &SampleSet, k: usize) -> Result<f64, AnalysisError> {
    if set.is_empty() {
        return Err(AnalysisError::EmptySet);
    }
    if k == 0 || k > set.len() {
        return Err(AnalysisError::KTooLarge { k, n: set.len() });
    }
    let mut rewards = set.samples.iter().map(reward_of).collect::<Result<Vec<_>, _>>()?;
    rewards.sort_by(|a, b| b.total_cmp(a));
    Ok(rewards[..k].iter().sum::<f64>() / k as f64)
}

/// How an answer is pulled out of a response for voting.
#[derive(Debug, Clone, Default)]
pub enum AnswerExtractor {
    /// Last `\boxed{...}` group, else the last number in the text.
    #[default]
    BoxedOrLastNumber,
    /// Last match of the pattern; capture group 1 when present.
    Regex(Regex),
    /// Text between the last `start` and the following `end`
    /// (end of line when `end` is empty), trimmed.
    Delimited { start: String, end: String },
}

fn last_number() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?(?:/\d+)?").expect("valid pattern"))
}

fn last_boxed(text: &str) -> Option<String> {
    let start = text.rfind("\\boxed{")? + "\\boxed{".len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].trim().to_string());
                }
            }
            _ => {}
        }
    }
    None
}

impl AnswerExtractor {
    pub fn regex(pattern: &str) -> Result<Self, regex::Error> {
        Regex::new(pattern).map(Self::Regex)
    }

    pub fn extract(&self, text: &str) -> Option<String> {
        let answer = match self {
            Self::BoxedOrLastNumber => {
                last_boxed(text).or_else(|| last_number().find_iter(text).last().map(|m| m.as_str().to_string()))
            }
            Self::Regex(re) => re
                .captures_iter(text)
                .last()
                .and_then(|c| c.get(1).or_else(|| c.get(0)))
                .map(|m| m.as_str().trim().to_string()),
            Self::Delimited { start, end } => {
                let from = text.rfind(start.as_str())? + start.len();
                let rest = &text[from..];
                let stop = if end.is_empty() {
                    rest.find('\n')
                } else {
                    rest.find(end.as_str())
                };
                Some(rest[..stop.unwrap_or(rest.len())].trim().to_string())
            }
        };
        answer.filter(|a| !a.is_empty())
    }
}

/// Most frequent answer among samples with `sample_index < first_n`.
/// Ties go to the answer whose earliest occurrence comes first.
pub fn majority_vote(set: &SampleSet, extractor: &AnswerExtractor, first_n: usize) -> Result<String, AnalysisError> {
    if set.is_empty() {
        return Err(AnalysisError::EmptySet);
    }
    if first_n > set.len() {
        return Err(AnalysisError::KTooLarge {
            k: first_n,
            n: set.len(),
        });
    }
    // answer -> (count, first index)
    let mut tally: HashMap<String, (usize, usize)> = HashMap::new();
    for s in set.samples.iter().filter(|s| s.sample_index < first_n) {
        if let Some(a) = extractor.extract(&s.text) {
            let e = tally.entry(a).or_insert((0, s.sample_index));
            e.0 += 1;
        }
    }
    tally
        .into_iter()
        .max_by(|(_, (ca, ia)), (_, (cb, ib))| ca.cmp(cb).then(ib.cmp(ia)))
        .map(|(a, _)| a)
        .ok_or(AnalysisError::NoExtractableAnswer)
}

/// Agents that produced the best response of a prompt, in refinement order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementPath {
    pub prompt_id: String,
    pub agent_sequence: Vec<String>,
    pub terminal_reward: f64,
}

impl RefinementPath {
    pub fn key(&self) -> String {
        self.agent_sequence.join(">")
    }
}

/// Highest-reward response node; ties go to the lowest sample index.
pub fn best_response(tree: &SearchTree) -> Result<NodeId, AnalysisError> {
    let mut best: Option<(NodeId, f64, usize)> = None;
    for node in tree.response_nodes() {
        let r = node.reward.unwrap_or(f64::NEG_INFINITY);
        let idx = node.sample_index.unwrap_or(usize::MAX);
        if best.is_none_or(|(_, br, bi)| r > br || (r == br && idx < bi)) {
            best = Some((node.node_id, r, idx));
        }
    }
    best.map(|(id, _, _)| id).ok_or(AnalysisError::EmptyTree)
}

/// Refinement lineage of the best response. A step that generated without
/// context starts the sequence.
pub fn best_path(tree: &SearchTree, prompt_id: &str) -> Result<RefinementPath, AnalysisError> {
    let id = best_response(tree)?;
    Ok(RefinementPath {
        prompt_id: prompt_id.to_string(),
        agent_sequence: tree.lineage_agents(id).into_iter().map(str::to_string).collect(),
        terminal_reward: tree.node(id).reward.unwrap_or(f64::NEG_INFINITY),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathCount {
    pub path: String,
    pub count: usize,
    pub distinct_models: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathFrequencies {
    /// Most frequent first, ties in lexicographic order, at most `top` rows.
    pub ranked: Vec<PathCount>,
    pub total_paths: usize,
    /// Number of distinct agents on a path -> number of paths (all paths).
    pub distinct_model_counts: BTreeMap<usize, usize>,
}

pub fn path_frequencies(paths: &[RefinementPath], top: usize) -> PathFrequencies {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    let mut distinct_model_counts = BTreeMap::new();
    for p in paths {
        let mut agents: Vec<&String> = p.agent_sequence.iter().collect();
        agents.sort();
        agents.dedup();
        *distinct_model_counts.entry(agents.len()).or_insert(0) += 1;
        counts.entry(p.key()).or_insert((0, agents.len())).0 += 1;
    }
    let mut ranked: Vec<PathCount> = counts
        .into_iter()
        .map(|(path, (count, distinct_models))| PathCount {
            path,
            count,
            distinct_models,
        })
        .collect();
    ranked.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.path.cmp(&b.path)));
    ranked.truncate(top.max(1));
    PathFrequencies {
        ranked,
        total_paths: paths.len(),
        distinct_model_counts,
    }
}

/// Predecessor -> successor counts over adjacent agents in paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionStats {
    pub counts: BTreeMap<(String, String), u64>,
    pub row_proportions: BTreeMap<(String, String), f64>,
}

impl TransitionStats {
    pub fn predecessors(&self) -> Vec<&str> {
        let mut rows: Vec<&str> = self.counts.keys().map(|(p, _)| p.as_str()).collect();
        rows.dedup();
        rows
    }

    pub fn proportion(&self, pred: &str, succ: &str) -> f64 {
        self.row_proportions
            .get(&(pred.to_string(), succ.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    /// Mean of `P(succ = pred | pred)` over observed predecessors.
    pub fn diagonal_mean(&self) -> Option<f64> {
        let rows = self.predecessors();
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|p| self.proportion(p, p)).sum::<f64>() / rows.len() as f64)
    }

    /// Mean of `P(succ | pred)` over observed predecessors and every
    /// `succ != pred` drawn from `agents`.
    pub fn off_diagonal_mean(&self, agents: &[String]) -> Option<f64> {
        let rows = self.predecessors();
        let cells: Vec<f64> = rows
            .iter()
            .flat_map(|p| {
                agents
                    .iter()
                    .filter(move |s| s.as_str() != *p)
                    .map(move |s| self.proportion(p, s))
            })
            .collect();
        if cells.is_empty() {
            return None;
        }
        Some(cells.iter().sum::<f64>() / cells.len() as f64)
    }
}

pub fn transition_proportions(paths: &[RefinementPath]) -> TransitionStats {
    let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    for p in paths {
        for w in p.agent_sequence.windows(2) {
            *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
        }
    }
    let mut row_totals: BTreeMap<&str, u64> = BTreeMap::new();
    for ((pred, _), c) in &counts {
        *row_totals.entry(pred.as_str()).or_insert(0) += c;
    }
    let row_proportions = counts
        .iter()
        .map(|(key, &c)| (key.clone(), c as f64 / row_totals[key.0.as_str()] as f64))
        .collect();
    TransitionStats {
        counts,
        row_proportions,
    }
}

/// Highest response reward produced by one agent at one layer of one tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub agent_id: String,
    pub depth: usize,
    pub max_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerStats {
    /// Sorted by (agent, depth).
    pub records: Vec<LayerRecord>,
    /// Depth of the best response in the tree.
    pub best_depth: usize,
    pub max_depth: usize,
}

impl LayerStats {
    pub fn contains_best(&self, depth: usize) -> bool {
        depth == self.best_depth
    }
}

/// Per-(agent, depth) maximum reward, where depth counts response nodes on
/// the root path (root children's responses are at depth 1).
pub fn layer_reward_stats(tree: &SearchTree) -> Result<LayerStats, AnalysisError> {
    let best = best_response(tree)?;
    let mut max: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for node in tree.response_nodes() {
        let model = tree.node(node.parent_id.expect("responses have a parent"));
        let agent = model.agent_id.clone().expect("model nodes carry an agent");
        let r = node.reward.unwrap_or(f64::NEG_INFINITY);
        max.entry((agent, node.depth))
            .and_modify(|m| *m = m.max(r))
            .or_insert(r);
    }
    Ok(LayerStats {
        records: max
            .into_iter()
            .map(|((agent_id, depth), max_reward)| LayerRecord {
                agent_id,
                depth,
                max_reward,
            })
            .collect(),
        best_depth: tree.node(best).depth,
        max_depth: tree.max_depth(),
    })
}

/// Cross-prompt layer summary row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub agent_id: String,
    pub depth: usize,
    /// Mean over prompts of the per-prompt maximum.
    pub mean_max_reward: f64,
    pub prompts: usize,
    /// Share of prompts whose best response lies at this depth.
    pub best_proportion: f64,
}

pub fn summarize_layers(stats: &[LayerStats]) -> Vec<LayerSummary> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for s in stats {
        for r in &s.records {
            let e = acc.entry((r.agent_id.clone(), r.depth)).or_insert((0.0, 0));
            e.0 += r.max_reward;
            e.1 += 1;
        }
    }
    let total = stats.len().max(1) as f64;
    acc.into_iter()
        .map(|((agent_id, depth), (sum, prompts))| LayerSummary {
            best_proportion: stats.iter().filter(|s| s.contains_best(depth)).count() as f64 / total,
            agent_id,
            depth,
            mean_max_reward: sum / prompts as f64,
            prompts,
        })
        .collect()
}

/// Trailing mean over the last `min(window, i + 1)` values.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            series[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering. Model nodes read `agent(v/n)`, responses
/// `index(reward)`; the path to the best response is drawn in red.
pub fn export_dot(tree: &SearchTree) -> String {
    let highlighted: Vec<NodeId> = best_response(tree)
        .map(|id| tree.path_from_root(id))
        .unwrap_or_default();
    let on_path = |id: NodeId| highlighted.contains(&id);
    let mut out = String::from("digraph toa {\n  node [fontname=\"Helvetica\"];\n");
    for node in tree.nodes() {
        let (label, shape) = match node.kind {
            NodeKind::Root => ("root".to_string(), "doublecircle"),
            NodeKind::Model => (
                format!("{}({:.4}/{})", node.agent_id.as_deref().unwrap_or("?"), node.v, node.n),
                "box",
            ),
            NodeKind::Response => (
                format!(
                    "{}({:.4})",
                    node.sample_index.unwrap_or(0),
                    node.reward.unwrap_or(f64::NAN)
                ),
                "ellipse",
            ),
        };
        let style = if on_path(node.node_id) {
            ", color=red, fontcolor=red"
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "  n{} [label=\"{}\", shape={}{}];",
            node.node_id,
            dot_escape(&label),
            shape,
            style
        );
    }
    for node in tree.nodes() {
        if let Some(p) = node.parent_id {
            let style = if on_path(p) && on_path(node.node_id) {
                " [color=red, penwidth=2]"
            } else {
                ""
            };
            let _ = writeln!(out, "  n{} -> n{}{};", p, node.node_id, style);
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Strategy;
    use crate::toa::{backpropagate, expand_response_node, RootMergeMode};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sample(i: usize, text: &str, r: f64) -> Sample {
        Sample {
            sample_index: i,
            text: text.to_string(),
            agent_id: "A".into(),
            parent_index: None,
            moa_context_indices: vec![],
            reward: Some(r),
            prompt_tokens: 0,
            completion_tokens: 0,
            seed: 0,
        }
    }

    fn set_of(rewards: &[f64]) -> SampleSet {
        let mut set = SampleSet::new("p", "q", Strategy::ParallelEnsemble, rewards.len());
        for (i, &r) in rewards.iter().enumerate() {
            set.register_sample(sample(i, "", r)).unwrap();
        }
        set
    }

    fn texts(answers: &[&str]) -> SampleSet {
        let mut set = SampleSet::new("p", "q", Strategy::ParallelEnsemble, answers.len());
        for (i, a) in answers.iter().enumerate() {
            set.register_sample(sample(i, &format!("so \\boxed{{{a}}}"), 0.0))
                .unwrap();
        }
        set
    }

    fn path(seq: &[&str]) -> RefinementPath {
        RefinementPath {
            prompt_id: "p".into(),
            agent_sequence: seq.iter().map(|s| s.to_string()).collect(),
            terminal_reward: 0.0,
        }
    }

    #[test]
    fn best_of_n_examples() {
        assert_eq!(best_of_n(&set_of(&[0.1, 0.9, 0.4])).unwrap().sample_index, 1);
        assert_eq!(best_of_n(&set_of(&[0.5, 0.5])).unwrap().sample_index, 0);
        assert_eq!(best_of_n(&set_of(&[])), Err(AnalysisError::EmptySet));
    }

    #[test]
    fn best_of_n_matches_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rewards: Vec<f64> = (0..200).map(|_| (rng.random_range(0..50) as f64) / 50.0).collect();
        let set = set_of(&rewards);
        let mut oracle = 0;
        for i in 1..rewards.len() {
            if rewards[i] > rewards[oracle] {
                oracle = i;
            }
        }
        assert_eq!(best_of_n(&set).unwrap().sample_index, oracle);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_mean(&set_of(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap(), 3.5);
        assert_eq!(top_k_mean(&set_of(&[1.0, 2.0, 3.0, 4.0]), 4).unwrap(), 2.5);
        assert_eq!(
            top_k_mean(&set_of(&[1.0]), 2),
            Err(AnalysisError::KTooLarge { k: 2, n: 1 })
        );
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let rewards: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let mut sorted = rewards.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = sorted[54..].iter().sum::<f64>() / 10.0;
        assert!((top_k_mean(&set_of(&rewards), 10).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn majority_examples() {
        let ex = AnswerExtractor::default();
        assert_eq!(majority_vote(&texts(&["A", "B", "A"]), &ex, 3).unwrap(), "A");
        assert_eq!(majority_vote(&texts(&["A", "B"]), &ex, 2).unwrap(), "A");
        assert_eq!(majority_vote(&texts(&["B", "A", "A", "B"]), &ex, 4).unwrap(), "B");
        assert_eq!(majority_vote(&texts(&["A", "B", "B"]), &ex, 1).unwrap(), "A");
        let none = set_of(&[0.0, 0.0]);
        assert_eq!(majority_vote(&none, &ex, 2), Err(AnalysisError::NoExtractableAnswer));
    }

    #[test]
    fn majority_matches_planted_split() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut answers: Vec<&str> = [vec!["42"; 30], vec!["17"; 20]].concat();
        use rand::seq::SliceRandom;
        answers.shuffle(&mut rng);
        let set = texts(&answers);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for a in &answers {
            *counts.entry(a).or_default() += 1;
        }
        assert_eq!(counts["42"], 30);
        assert_eq!(majority_vote(&set, &AnswerExtractor::default(), 50).unwrap(), "42");
    }

    #[test]
    fn extractors() {
        let d = AnswerExtractor::default();
        assert_eq!(d.extract("x \\boxed{\\frac{1}{2}} y").as_deref(), Some("\\frac{1}{2}"));
        assert_eq!(d.extract("first 3 then -4.5 done").as_deref(), Some("-4.5"));
        assert_eq!(d.extract("nothing here"), None);
        let re = AnswerExtractor::regex(r"Answer: (\w+)").unwrap();
        assert_eq!(re.extract("Answer: a\nAnswer: b").as_deref(), Some("b"));
        let del = AnswerExtractor::Delimited {
            start: "####".into(),
            end: String::new(),
        };
        assert_eq!(del.extract("work\n#### 12 \nmore").as_deref(), Some("12"));
    }

    #[test]
    fn path_frequency_examples() {
        let paths = vec![path(&["A", "B"]), path(&["A", "B"]), path(&["B", "A"])];
        let f = path_frequencies(&paths, 20);
        assert_eq!(
            f.ranked.iter().map(|r| (r.path.as_str(), r.count)).collect::<Vec<_>>(),
            vec![("A>B", 2), ("B>A", 1)]
        );
        assert_eq!(path_frequencies(&paths, 1).ranked.len(), 1);
        assert_eq!(f.distinct_model_counts[&2], 3);
    }

    #[test]
    fn path_frequencies_match_hash_count() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let agents = ["A", "B", "C"];
        let paths: Vec<RefinementPath> = (0..500)
            .map(|_| {
                let len = rng.random_range(1..4);
                path(&(0..len).map(|_| agents[rng.random_range(0..3)]).collect::<Vec<_>>())
            })
            .collect();
        let mut oracle: HashMap<String, usize> = HashMap::new();
        for p in &paths {
            *oracle.entry(p.agent_sequence.concat()).or_default() += 1;
        }
        let f = path_frequencies(&paths, usize::MAX);
        assert_eq!(f.ranked.len(), oracle.len());
        assert_eq!(f.ranked.iter().map(|r| r.count).sum::<usize>(), 500);
        for r in &f.ranked {
            assert_eq!(oracle[&r.path.replace('>', "")], r.count);
        }
        assert!(f
            .ranked
            .windows(2)
            .all(|w| w[0].count > w[1].count || (w[0].count == w[1].count && w[0].path < w[1].path)));
    }

    #[test]
    fn transition_examples() {
        let t = transition_proportions(&[path(&["A", "B", "A"])]);
        assert_eq!(t.counts.len(), 2);
        assert_eq!(t.counts[&("A".into(), "B".into())], 1);
        assert_eq!(t.counts[&("B".into(), "A".into())], 1);
        let t = transition_proportions(&[path(&["A", "A"])]);
        assert_eq!(t.counts[&("A".into(), "A".into())], 1);
        assert_eq!(t.diagonal_mean(), Some(1.0));
        assert_eq!(t.off_diagonal_mean(&["A".into(), "B".into()]), Some(0.0));
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 2), vec![1.0, 1.5, 2.5]);
        assert_eq!(moving_average(&[4.0, -1.0, 7.0], 1), vec![4.0, -1.0, 7.0]);
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0];
        let cumulative: Vec<f64> = (0..xs.len())
            .map(|i| xs[..=i].iter().sum::<f64>() / (i + 1) as f64)
            .collect();
        let got = moving_average(&xs, 10);
        assert!(got.iter().zip(&cumulative).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn small_tree() -> SearchTree {
        let mut tree = SearchTree::new(vec!["A".into(), "B".into()], RootMergeMode::Fresh);
        let a = tree.root_child(0);
        let r0 = tree.add_response(a, 0, 0.4);
        backpropagate(&mut tree, r0, 0.4);
        let kids = expand_response_node(&mut tree, r0).unwrap();
        // refine with B, then refine that with A
        let r1 = tree.add_response(kids[1], 1, 0.6);
        backpropagate(&mut tree, r1, 0.6);
        let kids2 = expand_response_node(&mut tree, r1).unwrap();
        let r2 = tree.add_response(kids2[0], 2, 0.9);
        backpropagate(&mut tree, r2, 0.9);
        // merged fresh node under r0 starts a new lineage
        let r3 = tree.add_response(kids[3], 3, 0.5);
        backpropagate(&mut tree, r3, 0.5);
        tree
    }

    #[test]
    fn best_path_examples() {
        let mut tree = SearchTree::new(vec!["A".into()], RootMergeMode::Fresh);
        assert_eq!(best_path(&tree, "p"), Err(AnalysisError::EmptyTree));
        tree.add_response(tree.root_child(0), 0, 0.3);
        assert_eq!(best_path(&tree, "p").unwrap().agent_sequence, vec!["A"]);

        let tree = small_tree();
        let p = best_path(&tree, "p").unwrap();
        assert_eq!(p.agent_sequence, vec!["A", "B", "A"]);
        assert_eq!(p.terminal_reward, 0.9);
        // exhaustive scan oracle
        let top = tree
            .response_nodes()
            .map(|n| n.reward.unwrap())
            .fold(f64::MIN, f64::max);
        assert_eq!(top, p.terminal_reward);
        // merged fresh lineage is a single agent
        let r3 = tree
            .response_nodes()
            .find(|n| n.sample_index == Some(3))
            .unwrap()
            .node_id;
        assert_eq!(tree.lineage_agents(r3), vec!["B"]);
    }

    #[test]
    fn best_path_tie_takes_lowest_index() {
        let mut tree = SearchTree::new(vec!["A".into(), "B".into()], RootMergeMode::Fresh);
        tree.add_response(tree.root_child(1), 1, 0.7);
        tree.add_response(tree.root_child(0), 0, 0.7);
        assert_eq!(best_path(&tree, "p").unwrap().agent_sequence, vec!["A"]);
    }

    #[test]
    fn layer_stats() {
        let mut tree = SearchTree::new(vec!["A".into(), "B".into()], RootMergeMode::Fresh);
        tree.add_response(tree.root_child(0), 0, 0.2);
        tree.add_response(tree.root_child(0), 1, 0.5);
        tree.add_response(tree.root_child(1), 2, 0.3);
        let s = layer_reward_stats(&tree).unwrap();
        assert_eq!(s.records.len(), 2);
        assert_eq!(s.records[0].max_reward, 0.5);
        assert_eq!(s.best_depth, 1);

        let s = layer_reward_stats(&small_tree()).unwrap();
        assert_eq!(s.best_depth, 3);
        assert!(s.contains_best(3));
        let summary = summarize_layers(&[s]);
        assert_eq!(
            summary
                .iter()
                .filter(|r| r.depth == 3)
                .map(|r| r.best_proportion)
                .sum::<f64>(),
            1.0
        );
    }

    /// Minimal checker for the DOT subset we emit: statements of
    /// `ID [attrs];` or `ID -> ID [attrs];` inside `digraph NAME { }`.
    fn parse_dot(text: &str) -> Option<(usize, Vec<(String, String)>)> {
        let body = text.trim().strip_prefix("digraph")?.trim_start();
        let open = body.find('{')?;
        let name = body[..open].trim();
        if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return None;
        }
        let inner = body[open + 1..].strip_suffix('}')?;
        let (mut nodes, mut edges) = (0, Vec::new());
        let attr =
            Regex::new(r#"^\[\s*\w+=("([^"\\]|\\.)*"|[\w.]+)(\s*,\s*\w+=("([^"\\]|\\.)*"|[\w.]+))*\s*\]$"#).unwrap();
        let id = Regex::new(r"^[A-Za-z_]\w*$").unwrap();
        for stmt in inner.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let stmt = stmt.strip_suffix(';')?;
            let (head, attrs) = match stmt.find('[') {
                Some(i) => (stmt[..i].trim(), Some(stmt[i..].trim())),
                None => (stmt, None),
            };
            if let Some(a) = attrs {
                if !attr.is_match(a) {
                    return None;
                }
            }
            if head == "node" {
                continue;
            }
            match head.split_once("->") {
                Some((a, b)) => {
                    let (a, b) = (a.trim(), b.trim());
                    if !id.is_match(a) || !id.is_match(b) {
                        return None;
                    }
                    edges.push((a.to_string(), b.to_string()));
                }
                None if id.is_match(head) => nodes += 1,
                None => return None,
            }
        }
        Some((nodes, edges))
    }

    #[test]
    fn dot_examples() {
        let tree = SearchTree::new(vec!["A".into()], RootMergeMode::Fresh);
        let mut bare = SearchTree::new(vec![], RootMergeMode::Fresh);
        assert_eq!(parse_dot(&export_dot(&bare)).unwrap(), (1, vec![]));
        let (nodes, edges) = parse_dot(&export_dot(&tree)).unwrap();
        assert_eq!((nodes, edges.len()), (2, 1));
        bare = tree;
        bare.add_response(bare.root_child(0), 0, 0.5);
        let dot = export_dot(&bare);
        let (nodes, edges) = parse_dot(&dot).unwrap();
        assert_eq!((nodes, edges.len()), (3, 2));
        assert!(dot.contains("n1 -> n2 [color=red"));
        assert!(dot.contains("label=\"A(0.0000/0)\""));
        assert!(dot.contains("label=\"0(0.5000)\""));
    }

    proptest! {
        #[test]
        fn transitions_rows_normalized(seqs in proptest::collection::vec(proptest::collection::vec(0u8..4, 1..6), 0..40)) {
            let paths: Vec<RefinementPath> = seqs.iter().map(|s| RefinementPath {
                prompt_id: "p".into(),
                agent_sequence: s.iter().map(|a| format!("M{a}")).collect(),
                terminal_reward: 0.0,
            }).collect();
            let t = transition_proportions(&paths);
            for pred in t.predecessors() {
                let row: f64 = t.row_proportions.iter().filter(|((p, _), _)| p == pred).map(|(_, v)| v).sum();
                prop_assert!((row - 1.0).abs() < 1e-9);
            }
            let f = path_frequencies(&paths, usize::MAX);
            prop_assert_eq!(f.ranked.iter().map(|r| r.count).sum::<usize>(), paths.len());
        }

        #[test]
        fn moving_average_shape(xs in proptest::collection::vec(-1e3f64..1e3, 0..50), w in 1usize..10) {
            let out = moving_average(&xs, w);
            prop_assert_eq!(out.len(), xs.len());
            prop_assert_eq!(moving_average(&xs, 1), xs.clone());
            for (i, y) in out.iter().enumerate() {
                let lo = i + 1 - (i + 1).min(w);
                let direct = xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
                prop_assert!((y - direct).abs() < 1e-9);
            }
        }

        #[test]
        fn best_of_n_is_max(rewards in proptest::collection::vec(0.0f64..1.0, 1..80)) {
            let set = set_of(&rewards);
            let max = rewards.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(best_of_n(&set).unwrap().reward, Some(max));
        }
    }
}
