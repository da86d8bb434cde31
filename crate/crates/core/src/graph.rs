//! The behavior graph: a weighted directed property graph over Agent, Person,
//! Desire and Intention nodes.
//!
//! Edge kinds constrain their endpoints:
//!
//! | kind         | source          | target    |
//! |--------------|-----------------|-----------|
//! | `SimilarTo`  | Agent           | Person    |
//! | `RelativeOf` | Person          | Person    |
//! | `WantTo`     | Person or Agent | Desire    |
//! | `ChooseTo`   | Desire          | Intention |
//!
//! Weights live in `[0, 1]`. `ChooseTo` edges also carry the recorded start
//! hour of the observation; their temporal-proximity weight depends on the
//! querying agent and is only finalized when a subgraph is extracted.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Attribute, ChoiceCategorySet, Output, SchemaError, TripRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Agent,
    Person,
    Desire,
    Intention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    RelativeOf,
    SimilarTo,
    WantTo,
    ChooseTo,
}

impl EdgeKind {
    pub fn allows(self, source: NodeKind, target: NodeKind) -> bool {
        use NodeKind::*;
        matches!(
            (self, source, target),
            (EdgeKind::SimilarTo, Agent, Person)
                | (EdgeKind::RelativeOf, Person, Person)
                | (EdgeKind::WantTo, Person | Agent, Desire)
                | (EdgeKind::ChooseTo, Desire, Intention)
        )
    }
}

pub type Attributes = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub label: String,
    pub attributes: Attributes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
    pub kind: EdgeKind,
    pub weight: f64,
    /// Start hour of the observation behind a `ChooseTo` edge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recorded_hour: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node label must not be empty")]
    EmptyLabel,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("edge weight {0} is outside [0, 1]")]
    WeightOutOfRange(f64),
    #[error("{kind:?} edge cannot connect {source_kind:?} to {target_kind:?}")]
    KindMismatch { kind: EdgeKind, source_kind: NodeKind, target_kind: NodeKind },
    #[error("intention {0:?} is not an option of any registered choice set")]
    UnregisteredIntention(String),
    #[error("choice set {0:?} is already registered")]
    DuplicateChoiceSet(String),
    #[error("record {row}: {source}")]
    SchemaViolation { row: usize, source: SchemaError },
}

pub const CHOICE_SET_KEY: &str = "choice_set";
pub const HOUSEHOLD_KEY: &str = "household_id";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BehaviorGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    out_edges: Vec<Vec<usize>>,
    choice_sets: Vec<ChoiceCategorySet>,
    intentions: BTreeMap<(String, String), NodeId>,
}

impl BehaviorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty graph with `primary_mode` and `duration_minutes` registered.
    pub fn with_default_choice_sets() -> Self {
        let mut g = Self::new();
        for output in Output::ALL {
            g.register_choice_set(output.choice_set()).expect("fresh graph has no choice sets");
        }
        g
    }

    pub fn register_choice_set(&mut self, set: ChoiceCategorySet) -> Result<(), GraphError> {
        if self.choice_set(set.name()).is_some() {
            return Err(GraphError::DuplicateChoiceSet(set.name().to_string()));
        }
        self.choice_sets.push(set);
        Ok(())
    }

    pub fn choice_sets(&self) -> &[ChoiceCategorySet] {
        &self.choice_sets
    }

    pub fn choice_set(&self, name: &str) -> Option<&ChoiceCategorySet> {
        self.choice_sets.iter().find(|s| s.name() == name)
    }

    /// Adds a node. Intention labels must be an option of a registered
    /// choice set; the set is taken from the `choice_set` attribute when
    /// present, otherwise the first registered set containing the label.
    pub fn add_node(
        &mut self,
        kind: NodeKind,
        label: impl Into<String>,
        mut attributes: Attributes,
    ) -> Result<NodeId, GraphError> {
        let label = label.into();
        if label.is_empty() {
            return Err(GraphError::EmptyLabel);
        }
        let id = NodeId(self.nodes.len() as u32);
        if kind == NodeKind::Intention {
            let set = match attributes.get(CHOICE_SET_KEY) {
                Some(name) => self.choice_set(name).filter(|s| s.contains(&label)),
                None => self.choice_sets.iter().find(|s| s.contains(&label)),
            }
            .ok_or_else(|| GraphError::UnregisteredIntention(label.clone()))?;
            let set_name = set.name().to_string();
            attributes.insert(CHOICE_SET_KEY.to_string(), set_name.clone());
            self.intentions.entry((set_name, label.clone())).or_insert(id);
        }
        self.nodes.push(Node { id, kind, label, attributes });
        self.out_edges.push(Vec::new());
        Ok(id)
    }

    pub fn add_edge(&mut self, source: NodeId, target: NodeId, kind: EdgeKind, weight: f64) -> Result<(), GraphError> {
        self.push_edge(Edge { source, target, kind, weight, recorded_hour: None })
    }

    /// Adds an edge with all fields given, including a recorded hour.
    pub fn push_edge(&mut self, edge: Edge) -> Result<(), GraphError> {
        let source_kind = self.node(edge.source).ok_or(GraphError::UnknownNode(edge.source))?.kind;
        let target_kind = self.node(edge.target).ok_or(GraphError::UnknownNode(edge.target))?.kind;
        if !(0.0..=1.0).contains(&edge.weight) {
            return Err(GraphError::WeightOutOfRange(edge.weight));
        }
        if !edge.kind.allows(source_kind, target_kind) {
            return Err(GraphError::KindMismatch { kind: edge.kind, source_kind, target_kind });
        }
        self.out_edges[edge.source.index()].push(self.edges.len());
        self.edges.push(edge);
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.index())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }

    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.iter().filter(move |n| n.kind == kind)
    }

    /// Outgoing edges of `id` in insertion order.
    pub fn out_edges(&self, id: NodeId) -> impl Iterator<Item = (usize, &Edge)> + '_ {
        self.out_edges.get(id.index()).into_iter().flatten().map(move |&e| (e, &self.edges[e]))
    }

    /// Intention node for `option` of choice set `set`, if present.
    pub fn intention(&self, set: &str, option: &str) -> Option<NodeId> {
        self.intentions.get(&(set.to_string(), option.to_string())).copied()
    }

    /// Builds the graph for a list of trip records.
    ///
    /// One Person per distinct (profile, household) pair, one Desire per
    /// person and (purpose, start hour), one `WantTo` edge Person→Desire,
    /// and one `ChooseTo` edge per record and registered output to the
    /// Intention of the observed choice. `ChooseTo` weights are stored as 1.0
    /// with the recorded hour attached. Persons sharing a household key get
    /// `RelativeOf` edges in both directions.
    pub fn build_from_records(records: &[TripRecord], config: &GraphBuildConfig) -> Result<BehaviorGraph, GraphError> {
        if !(0.0..=1.0).contains(&config.relative_weight) {
            return Err(GraphError::WeightOutOfRange(config.relative_weight));
        }
        let mut g = BehaviorGraph::new();
        for output in &config.outputs {
            g.register_choice_set(output.choice_set())?;
        }

        let mut persons: BTreeMap<(crate::schema::AgentProfile, Option<String>), NodeId> = BTreeMap::new();
        let mut desires: BTreeMap<(NodeId, &'static str, u8), NodeId> = BTreeMap::new();
        let mut households: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();

        for (row, record) in records.iter().enumerate() {
            record.validate().map_err(|source| GraphError::SchemaViolation { row: row + 1, source })?;

            let key = (record.profile, record.household.clone());
            let person = match persons.get(&key) {
                Some(&id) => id,
                None => {
                    let mut attrs: Attributes = record.profile.into();
                    if let Some(h) = &record.household {
                        attrs.insert(HOUSEHOLD_KEY.to_string(), h.clone());
                    }
                    let id = g.add_node(NodeKind::Person, record.profile.to_text(), attrs)?;
                    if let Some(h) = &record.household {
                        households.entry(h.clone()).or_default().push(id);
                    }
                    persons.insert(key, id);
                    id
                }
            };

            let desire_key = (person, record.trip_purpose, record.start_time);
            let desire = match desires.get(&desire_key) {
                Some(&id) => id,
                None => {
                    let d = record.desire();
                    let mut attrs = Attributes::new();
                    attrs.insert(Attribute::TripPurpose.name().to_string(), d.trip_purpose.to_string());
                    attrs.insert(Attribute::StartTime.name().to_string(), d.start_time.to_string());
                    let id = g.add_node(NodeKind::Desire, d.text(), attrs)?;
                    g.add_edge(person, id, EdgeKind::WantTo, 1.0)?;
                    desires.insert(desire_key, id);
                    id
                }
            };

            for output in &config.outputs {
                let option = record.choice(*output);
                let intention = match g.intention(output.name(), option) {
                    Some(id) => id,
                    None => {
                        let mut attrs = Attributes::new();
                        attrs.insert(CHOICE_SET_KEY.to_string(), output.name().to_string());
                        g.add_node(NodeKind::Intention, option, attrs)?
                    }
                };
                g.push_edge(Edge {
                    source: desire,
                    target: intention,
                    kind: EdgeKind::ChooseTo,
                    weight: 1.0,
                    recorded_hour: Some(record.start_time),
                })?;
            }
        }

        for members in households.values() {
            for &a in members {
                for &b in members {
                    if a != b {
                        g.add_edge(a, b, EdgeKind::RelativeOf, config.relative_weight)?;
                    }
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphBuildConfig {
    /// Outputs whose choice sets are registered and linked.
    pub outputs: Vec<Output>,
    /// Weight of `RelativeOf` edges built from household keys.
    pub relative_weight: f64,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        Self { outputs: Output::ALL.to_vec(), relative_weight: 1.0 }
    }
}

/// Circular distance between two hours of the day, in `0..=12`.
pub fn circular_hour_distance(a: u8, b: u8) -> u8 {
    let d = a.abs_diff(b) % 24;
    d.min(24 - d)
}

/// `exp(-Δ/τ)` with Δ the circular hour distance.
pub fn temporal_proximity(query_hour: u8, recorded_hour: u8, tau: f64) -> f64 {
    let delta = f64::from(circular_hour_distance(query_hour, recorded_hour));
    libm::exp(-delta / tau)
}
