//! Similar-person retrieval and behavioral subgraph extraction.
//!
//! Retrieval runs in two steps: a full-scan cosine search over Person profile
//! embeddings picks the top-k most similar persons, then a depth-limited
//! forward search from each of them collects the desires and intentions that
//! make up the agent's behavioral subgraph. The subgraph is a fresh
//! [`BehaviorGraph`] with a synthetic Agent node and all weights finalized for
//! this particular query.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{similarity_weight, EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::graph::{temporal_proximity, Attributes, BehaviorGraph, Edge, EdgeKind, GraphError, Node, NodeId, NodeKind};
use crate::schema::{AgentProfile, Attribute, Desire};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_TAU_HOURS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("graph has no person nodes")]
    EmptyGraph,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("no persons selected for extraction")]
    EmptySelection,
    #[error("search depth must be at least 1")]
    InvalidDepth,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not a person")]
    NotAPerson(NodeId),
    #[error("node {0} is not an agent")]
    NotAnAgent(NodeId),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// The agent whose choice is being modeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAgent {
    pub profile: AgentProfile,
    pub desire: Desire,
    /// Free-text conditions (weather, city, recent activity). May be empty.
    #[serde(default)]
    pub context: String,
}

impl QueryAgent {
    pub fn new(profile: AgentProfile, desire: Desire) -> Self {
        Self { profile, desire, context: String::new() }
    }

    /// All eight input fields as `key: value` pairs in schema order.
    pub fn to_text(&self) -> String {
        let mut text = self.profile.to_text();
        text.push_str("; ");
        text.push_str(Attribute::TripPurpose.name());
        text.push_str(": ");
        text.push_str(self.desire.trip_purpose);
        text.push_str("; ");
        text.push_str(Attribute::StartTime.name());
        text.push_str(": ");
        text.push_str(&self.desire.start_time.to_string());
        text
    }
}

/// Parameters of subgraph extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgraphParams {
    /// Maximum number of edges followed from each selected person.
    pub depth: usize,
    /// Decay constant of temporal proximity, in hours.
    pub tau: f64,
}

impl Default for SubgraphParams {
    fn default() -> Self {
        Self { depth: DEFAULT_DEPTH, tau: DEFAULT_TAU_HOURS }
    }
}

/// A query-specific subgraph rooted at a synthetic Agent node.
#[derive(Debug, Clone, PartialEq)]
pub struct BehavioralSubgraph {
    graph: BehaviorGraph,
    agent: NodeId,
    persons: Vec<(NodeId, f64)>,
    origin: Vec<Option<NodeId>>,
}

impl BehavioralSubgraph {
    /// Wraps a hand-built graph. `agent` must be an Agent node.
    pub fn from_graph(graph: BehaviorGraph, agent: NodeId) -> Result<Self, RetrievalError> {
        match graph.node(agent) {
            None => Err(RetrievalError::UnknownNode(agent)),
            Some(n) if n.kind != NodeKind::Agent => Err(RetrievalError::NotAnAgent(agent)),
            Some(_) => {
                let origin = vec![None; graph.node_count()];
                Ok(Self { graph, agent, persons: Vec::new(), origin })
            }
        }
    }

    pub fn graph(&self) -> &BehaviorGraph {
        &self.graph
    }

    pub fn agent(&self) -> NodeId {
        self.agent
    }

    /// Selected persons (ids in the source graph) with their similarity.
    pub fn persons(&self) -> &[(NodeId, f64)] {
        &self.persons
    }

    /// Source-graph id of a subgraph node; `None` for the agent.
    pub fn origin(&self, local: NodeId) -> Option<NodeId> {
        self.origin.get(local.index()).copied().flatten()
    }

    /// Source-graph ids of every non-agent node, ascending.
    pub fn source_nodes(&self) -> Vec<NodeId> {
        self.origin.iter().flatten().copied().collect()
    }
}

/// Precomputed embeddings of the Person and Desire nodes of one graph.
#[derive(Debug, Clone)]
pub struct GraphIndex {
    persons: Vec<(NodeId, EmbeddingVector)>,
    desires: BTreeMap<NodeId, EmbeddingVector>,
}

impl GraphIndex {
    pub fn build<P: EmbeddingProvider + ?Sized>(graph: &BehaviorGraph, provider: &P) -> Result<Self, EmbeddingError> {
        let mut persons = Vec::new();
        let mut desires = BTreeMap::new();
        for node in graph.nodes() {
            match node.kind {
                NodeKind::Person => persons.push((node.id, provider.embed(&node.label)?)),
                NodeKind::Desire => {
                    desires.insert(node.id, provider.embed(&node.label)?);
                }
                _ => {}
            }
        }
        Ok(Self { persons, desires })
    }

    pub fn person_count(&self) -> usize {
        self.persons.len()
    }

    /// Top-k persons for an already-embedded profile.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(NodeId, f64)>, RetrievalError> {
        rank(self.persons.iter().map(|(id, v)| (*id, v)), query, k)
    }
}

fn rank<'a>(
    persons: impl Iterator<Item = (NodeId, &'a EmbeddingVector)>,
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<(NodeId, f64)>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let mut scored =
        persons.map(|(id, v)| similarity_weight(query, v).map(|w| (id, w))).collect::<Result<Vec<_>, _>>()?;
    if scored.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Top-k Person nodes by clamped cosine similarity of profile texts, sorted
/// descending with ties broken by ascending node id.
pub fn top_k_similar<P: EmbeddingProvider + ?Sized>(
    graph: &BehaviorGraph,
    agent: &QueryAgent,
    k: usize,
    provider: &P,
) -> Result<Vec<(NodeId, f64)>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let query = provider.embed(&agent.profile.to_text())?;
    let vectors = graph
        .nodes_of_kind(NodeKind::Person)
        .map(|n| provider.embed(&n.label).map(|v| (n.id, v)))
        .collect::<Result<Vec<_>, _>>()?;
    rank(vectors.iter().map(|(id, v)| (*id, v)), &query, k)
}

/// Extracts the behavioral subgraph for `agent` around the selected persons.
pub fn extract_subgraph<P: EmbeddingProvider + ?Sized>(
    graph: &BehaviorGraph,
    agent: &QueryAgent,
    persons: &[(NodeId, f64)],
    params: &SubgraphParams,
    provider: &P,
) -> Result<BehavioralSubgraph, RetrievalError> {
    let agent_desire = provider.embed(&agent.desire.text())?;
    extract_with(graph, agent, &agent_desire, persons, params, |node| provider.embed(&node.label))
}

/// As [`extract_subgraph`], with desire embeddings taken from `index`.
pub fn extract_subgraph_indexed<P: EmbeddingProvider + ?Sized>(
    graph: &BehaviorGraph,
    index: &GraphIndex,
    agent: &QueryAgent,
    persons: &[(NodeId, f64)],
    params: &SubgraphParams,
    provider: &P,
) -> Result<BehavioralSubgraph, RetrievalError> {
    let agent_desire = provider.embed(&agent.desire.text())?;
    extract_with(graph, agent, &agent_desire, persons, params, |node| match index.desires.get(&node.id) {
        Some(v) => Ok(v.clone()),
        None => provider.embed(&node.label),
    })
}

fn follows(kind: EdgeKind) -> bool {
    matches!(kind, EdgeKind::RelativeOf | EdgeKind::WantTo | EdgeKind::ChooseTo)
}

/// Shallowest depth at which each node is reached from any selected person.
/// A node is re-expanded when reached again at a strictly smaller depth, so
/// the result is the exact depth-bounded reachable set.
fn reach_depths(graph: &BehaviorGraph, starts: &[(NodeId, f64)], max_depth: usize) -> Vec<Option<usize>> {
    let mut best: Vec<Option<usize>> = vec![None; graph.node_count()];
    for &(start, _) in starts {
        let mut stack = vec![(start, 0usize)];
        while let Some((u, d)) = stack.pop() {
            if best[u.index()].is_some_and(|b| b <= d) {
                continue;
            }
            best[u.index()] = Some(d);
            if d == max_depth {
                continue;
            }
            let next: Vec<NodeId> =
                graph.out_edges(u).filter(|(_, e)| follows(e.kind)).map(|(_, e)| e.target).collect();
            stack.extend(next.into_iter().rev().map(|t| (t, d + 1)));
        }
    }
    best
}

fn extract_with(
    graph: &BehaviorGraph,
    agent: &QueryAgent,
    agent_desire: &EmbeddingVector,
    persons: &[(NodeId, f64)],
    params: &SubgraphParams,
    desire_vector: impl Fn(&Node) -> Result<EmbeddingVector, EmbeddingError>,
) -> Result<BehavioralSubgraph, RetrievalError> {
    if persons.is_empty() {
        return Err(RetrievalError::EmptySelection);
    }
    if params.depth == 0 {
        return Err(RetrievalError::InvalidDepth);
    }
    for &(id, _) in persons {
        match graph.node(id) {
            None => return Err(RetrievalError::UnknownNode(id)),
            Some(n) if n.kind != NodeKind::Person => return Err(RetrievalError::NotAPerson(id)),
            Some(_) => {}
        }
    }

    let depths = reach_depths(graph, persons, params.depth);

    let mut sub = BehaviorGraph::new();
    for set in graph.choice_sets() {
        sub.register_choice_set(set.clone())?;
    }
    let mut agent_attrs: Attributes = agent.profile.into();
    agent_attrs.insert(Attribute::TripPurpose.name().to_string(), agent.desire.trip_purpose.to_string());
    agent_attrs.insert(Attribute::StartTime.name().to_string(), agent.desire.start_time.to_string());
    let agent_id = sub.add_node(NodeKind::Agent, agent.to_text(), agent_attrs)?;

    let mut origin = vec![None];
    let mut local: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for node in graph.nodes() {
        if depths[node.id.index()].is_some() {
            let id = sub.add_node(node.kind, node.label.clone(), node.attributes.clone())?;
            local.insert(node.id, id);
            origin.push(Some(node.id));
        }
    }

    for &(person, sim) in persons {
        sub.add_edge(agent_id, local[&person], EdgeKind::SimilarTo, sim)?;
    }

    let mut want_cache: BTreeMap<NodeId, f64> = BTreeMap::new();
    for node in graph.nodes() {
        let Some(d) = depths[node.id.index()] else { continue };
        if d >= params.depth {
            continue;
        }
        for (_, edge) in graph.out_edges(node.id).filter(|(_, e)| follows(e.kind)) {
            let weight = match edge.kind {
                EdgeKind::WantTo => match want_cache.get(&edge.target) {
                    Some(w) => *w,
                    None => {
                        let target = graph.node(edge.target).ok_or(RetrievalError::UnknownNode(edge.target))?;
                        let w = similarity_weight(agent_desire, &desire_vector(target)?)?;
                        want_cache.insert(edge.target, w);
                        w
                    }
                },
                EdgeKind::ChooseTo => match edge.recorded_hour {
                    Some(h) => temporal_proximity(agent.desire.start_time, h, params.tau),
                    None => edge.weight,
                },
                _ => edge.weight,
            };
            sub.push_edge(Edge {
                source: local[&edge.source],
                target: local[&edge.target],
                kind: edge.kind,
                weight,
                recorded_hour: edge.recorded_hour,
            })?;
        }
    }

    Ok(BehavioralSubgraph { graph: sub, agent: agent_id, persons: persons.to_vec(), origin })
}
