//! Line-delimited JSON snapshots of a behavior graph.
//!
//! One header line, then choice sets, nodes in id order and edges in
//! insertion order. Weights round-trip bit-exactly.

use std::io::{BufRead, Write};

use prefchain_core::graph::{Attributes, BehaviorGraph, Edge, EdgeKind, GraphError, NodeId, NodeKind};
use prefchain_core::schema::ChoiceCategorySet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SNAPSHOT_FORMAT: &str = "prefchain-graph";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {source}")]
    Graph { line: usize, source: GraphError },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Header {
        format: String,
        version: u32,
    },
    ChoiceSet {
        name: String,
        options: Vec<String>,
    },
    Node {
        id: NodeId,
        kind: NodeKind,
        label: String,
        attributes: Attributes,
    },
    Edge {
        source: NodeId,
        target: NodeId,
        kind: EdgeKind,
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        recorded_hour: Option<u8>,
    },
}

pub fn write_snapshot<W: Write>(graph: &BehaviorGraph, mut out: W) -> Result<(), SnapshotError> {
    let mut emit = |line: &Line| -> Result<(), SnapshotError> {
        serde_json::to_writer(&mut out, line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    emit(&Line::Header { format: SNAPSHOT_FORMAT.into(), version: SNAPSHOT_VERSION })?;
    for set in graph.choice_sets() {
        emit(&Line::ChoiceSet { name: set.name().into(), options: set.options().to_vec() })?;
    }
    for node in graph.nodes() {
        emit(&Line::Node {
            id: node.id,
            kind: node.kind,
            label: node.label.clone(),
            attributes: node.attributes.clone(),
        })?;
    }
    for edge in graph.edges() {
        emit(&Line::Edge {
            source: edge.source,
            target: edge.target,
            kind: edge.kind,
            weight: edge.weight,
            recorded_hour: edge.recorded_hour,
        })?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(input: R) -> Result<BehaviorGraph, SnapshotError> {
    let mut graph = BehaviorGraph::new();
    let mut saw_header = false;
    for (i, text) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| SnapshotError::Malformed { line: line_no, message };
        let graph_err = |source| SnapshotError::Graph { line: line_no, source };
        let line: Line = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        match line {
            Line::Header { format, version } => {
                if saw_header || format != SNAPSHOT_FORMAT || version != SNAPSHOT_VERSION {
                    return Err(malformed(format!("unexpected header {format} v{version}")));
                }
                saw_header = true;
                continue;
            }
            _ if !saw_header => return Err(malformed("missing header".into())),
            Line::ChoiceSet { name, options } => {
                let set = ChoiceCategorySet::new(name, options).map_err(|e| malformed(e.to_string()))?;
                graph.register_choice_set(set).map_err(graph_err)?;
            }
            Line::Node { id, kind, label, attributes } => {
                let got = graph.add_node(kind, label, attributes).map_err(graph_err)?;
                if got != id {
                    return Err(malformed(format!("node {id} out of order, expected {got}")));
                }
            }
            Line::Edge { source, target, kind, weight, recorded_hour } => {
                graph.push_edge(Edge { source, target, kind, weight, recorded_hour }).map_err(graph_err)?
            }
        }
    }
    if !saw_header {
        return Err(SnapshotError::Malformed { line: 0, message: "empty snapshot".into() });
    }
    Ok(graph)
}
