use serde::{Deserialize, Serialize};

use super::RootMergeMode;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Root,
    Model,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: NodeId,
    pub kind: NodeKind,
    /// Generating agent (model nodes).
    pub agent_id: Option<String>,
    /// Registered sample (response nodes).
    pub sample_index: Option<usize>,
    /// Reward of the sample (response nodes).
    pub reward: Option<f64>,
    pub parent_id: Option<NodeId>,
    #[serde(skip)]
    pub children_ids: Vec<NodeId>,
    /// Cumulative reward.
    pub v: f64,
    /// Visit count.
    pub n: u64,
    /// Model node copied from a root child when its response parent expanded.
    pub inherited_from_root: bool,
    /// Response-layer depth: response nodes on the root path, inclusive.
    #[serde(skip)]
    pub depth: usize,
}

/// One completed select/expand/simulate/backpropagate cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    /// Root first, new response node last.
    pub path: Vec<NodeId>,
    pub reward: f64,
}

/// Alternating root → model → response → model … tree.
///
/// Nodes live in an arena indexed by id; ids follow creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    nodes: Vec<Node>,
    agents: Vec<String>,
    response_count: usize,
    merge_mode: RootMergeMode,
    simulations: Vec<SimulationRecord>,
    exhausted: Vec<bool>,
}

impl SearchTree {
    pub const ROOT: NodeId = 0;

    /// Root plus one unvisited model child per agent.
    pub fn new(agents: Vec<String>, merge_mode: RootMergeMode) -> Self {
        let mut tree = Self {
            nodes: Vec::new(),
            agents,
            response_count: 0,
            merge_mode,
            simulations: Vec::new(),
            exhausted: Vec::new(),
        };
        tree.push(Node {
            node_id: 0,
            kind: NodeKind::Root,
            agent_id: None,
            sample_index: None,
            reward: None,
            parent_id: None,
            children_ids: Vec::new(),
            v: 0.0,
            n: 0,
            inherited_from_root: false,
            depth: 0,
        });
        for k in 0..tree.agents.len() {
            tree.add_model_node(Self::ROOT, k, false);
        }
        tree
    }

    fn push(&mut self, node: Node) -> NodeId {
        let id = self.nodes.len();
        if let Some(p) = node.parent_id {
            self.nodes[p].children_ids.push(id);
        }
        self.nodes.push(Node { node_id: id, ..node });
        self.exhausted.push(false);
        id
    }

    pub(crate) fn add_model_node(&mut self, parent: NodeId, agent: usize, inherited: bool) -> NodeId {
        let (v, n) = if inherited {
            let twin = &self.nodes[self.root_child(agent)];
            (twin.v, twin.n)
        } else {
            (0.0, 0)
        };
        let depth = self.nodes[parent].depth;
        self.push(Node {
            node_id: 0,
            kind: NodeKind::Model,
            agent_id: Some(self.agents[agent].clone()),
            sample_index: None,
            reward: None,
            parent_id: Some(parent),
            children_ids: Vec::new(),
            v,
            n,
            inherited_from_root: inherited,
            depth,
        })
    }

    /// Adds an unvisited response node under `model`.
    pub fn add_response(&mut self, model: NodeId, sample_index: usize, reward: f64) -> NodeId {
        assert_eq!(
            self.nodes[model].kind,
            NodeKind::Model,
            "responses hang under model nodes"
        );
        let depth = self.nodes[model].depth + 1;
        self.response_count += 1;
        self.push(Node {
            node_id: 0,
            kind: NodeKind::Response,
            agent_id: None,
            sample_index: Some(sample_index),
            reward: Some(reward),
            parent_id: Some(model),
            children_ids: Vec::new(),
            v: 0.0,
            n: 0,
            inherited_from_root: false,
            depth,
        })
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut Node {
        &mut self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &Node {
        &self.nodes[Self::ROOT]
    }

    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub fn k(&self) -> usize {
        self.agents.len()
    }

    pub fn merge_mode(&self) -> RootMergeMode {
        self.merge_mode
    }

    pub fn response_count(&self) -> usize {
        self.response_count
    }

    pub fn agent_index(&self, agent_id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a == agent_id)
    }

    /// The root's model child for agent `k`.
    pub fn root_child(&self, k: usize) -> NodeId {
        self.nodes[Self::ROOT].children_ids[k]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children_ids
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent_id
    }

    /// Ids from the root down to `id`.
    pub fn path_from_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent_id {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn response_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Response)
    }

    pub fn model_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Model)
    }

    /// Whether generating from model node `id` refines its parent response.
    pub fn refines_parent(&self, id: NodeId) -> bool {
        let node = &self.nodes[id];
        node.kind == NodeKind::Model
            && node.parent_id.is_some_and(|p| self.nodes[p].kind == NodeKind::Response)
            && (!node.inherited_from_root || self.merge_mode == RootMergeMode::Refine)
    }

    /// Agents along the refinement lineage of response `id`, oldest first.
    pub fn lineage_agents(&self, id: NodeId) -> Vec<&str> {
        let mut agents = Vec::new();
        let mut cur = id;
        loop {
            let model = self.nodes[cur].parent_id.expect("response nodes have a parent");
            agents.push(
                self.nodes[model]
                    .agent_id
                    .as_deref()
                    .expect("model nodes carry an agent"),
            );
            if !self.refines_parent(model) {
                break;
            }
            cur = self.nodes[model]
                .parent_id
                .expect("refining model nodes sit under a response");
        }
        agents.reverse();
        agents
    }

    pub fn simulations(&self) -> &[SimulationRecord] {
        &self.simulations
    }

    pub(crate) fn log_simulation(&mut self, record: SimulationRecord) {
        self.simulations.push(record);
    }

    pub(crate) fn is_exhausted(&self, id: NodeId) -> bool {
        self.exhausted[id]
    }

    pub(crate) fn mark_exhausted(&mut self, id: NodeId) {
        self.exhausted[id] = true;
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Serializable view of the tree and its simulation log.
    pub fn snapshot(&self, prompt_id: &str, params: &super::ToaParams) -> TreeSnapshot {
        TreeSnapshot {
            format_version: TreeSnapshot::FORMAT_VERSION,
            prompt_id: prompt_id.to_string(),
            agents: self.agents.clone(),
            params: params.clone(),
            response_count: self.response_count,
            nodes: self.nodes.clone(),
            simulations: self.simulations.clone(),
        }
    }

    /// Rebuilds a tree from a snapshot. Children lists and depths are
    /// recomputed from parent links.
    pub fn from_snapshot(snap: &TreeSnapshot) -> Result<Self, String> {
        if snap.format_version != TreeSnapshot::FORMAT_VERSION {
            return Err(format!("unsupported tree format version {}", snap.format_version));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(snap.nodes.len());
        for (i, raw) in snap.nodes.iter().enumerate() {
            if raw.node_id != i {
                return Err(format!(
                    "node ids must be dense and ordered; found {} at position {i}",
                    raw.node_id
                ));
            }
            let mut node = raw.clone();
            node.children_ids.clear();
            node.depth = match node.parent_id {
                None if i == 0 && node.kind == NodeKind::Root => 0,
                None => return Err(format!("node {i} has no parent")),
                Some(p) if p >= i => return Err(format!("node {i} has forward parent {p}")),
                Some(p) => {
                    let parent_kind = nodes[p].kind;
                    let ok = match node.kind {
                        NodeKind::Model => parent_kind != NodeKind::Model,
                        NodeKind::Response => parent_kind == NodeKind::Model,
                        NodeKind::Root => false,
                    };
                    if !ok {
                        return Err(format!(
                            "node {i} ({:?}) cannot hang under {:?}",
                            node.kind, parent_kind
                        ));
                    }
                    nodes[p].children_ids.push(i);
                    nodes[p].depth + usize::from(node.kind == NodeKind::Response)
                }
            };
            nodes.push(node);
        }
        let response_count = nodes.iter().filter(|n| n.kind == NodeKind::Response).count();
        Ok(Self {
            exhausted: vec![false; nodes.len()],
            nodes,
            agents: snap.agents.clone(),
            response_count,
            merge_mode: snap.params.root_merge_mode,
            simulations: snap.simulations.clone(),
        })
    }
}

/// JSON form of a finished search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub format_version: u32,
    pub prompt_id: String,
    pub agents: Vec<String>,
    pub params: super::ToaParams,
    pub response_count: usize,
    pub nodes: Vec<Node>,
    pub simulations: Vec<SimulationRecord>,
}

impl TreeSnapshot {
    pub const FORMAT_VERSION: u32 = 1;
}
