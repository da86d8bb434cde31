//! Path-weight preference scoring.
//!
//! Every simple directed path from the agent node to an intention node, with
//! at most `K` edges, contributes the product of its edge weights. An
//! option's raw score is the sum over its paths; the prior over a choice set
//! is the raw scores normalized across all options of the set.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Edge, NodeId, NodeKind};
use crate::retrieval::BehavioralSubgraph;
use crate::schema::ChoiceCategorySet;

pub const DEFAULT_MAX_PATH_EDGES: usize = 4;

/// Tolerance on the total mass of a distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreferenceError {
    #[error("node {0} is not an intention in the subgraph")]
    NotAnIntention(NodeId),
    #[error("distribution has {got} probabilities for {expected} options")]
    LengthMismatch { expected: usize, got: usize },
    #[error("probability {0} is negative or not finite")]
    InvalidProbability(f64),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
}

/// One simple path with its multiplicative weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PathWeight {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<Edge>,
    pub weight: f64,
}

fn check_intention(sub: &BehavioralSubgraph, intention: NodeId) -> Result<(), PreferenceError> {
    match sub.graph().node(intention) {
        Some(n) if n.kind == NodeKind::Intention => Ok(()),
        _ => Err(PreferenceError::NotAnIntention(intention)),
    }
}

/// All simple paths agent → `intention` with at most `max_edges` edges,
/// ordered lexicographically by node sequence (parallel edges by edge index).
pub fn enumerate_paths(
    sub: &BehavioralSubgraph,
    intention: NodeId,
    max_edges: usize,
) -> Result<Vec<PathWeight>, PreferenceError> {
    check_intention(sub, intention)?;
    let g = sub.graph();
    let mut found: Vec<(Vec<NodeId>, Vec<usize>)> = Vec::new();
    let mut nodes = vec![sub.agent()];
    let mut edges: Vec<usize> = Vec::new();
    // stack of (node, next out-edge position)
    let mut stack: Vec<(NodeId, usize)> = vec![(sub.agent(), 0)];
    while let Some(top) = stack.last_mut() {
        let (u, pos) = *top;
        let next = g.out_edges(u).nth(pos);
        top.1 += 1;
        match next {
            Some((ei, e)) if edges.len() < max_edges && !nodes.contains(&e.target) => {
                nodes.push(e.target);
                edges.push(ei);
                if e.target == intention {
                    found.push((nodes.clone(), edges.clone()));
                }
                stack.push((e.target, 0));
            }
            Some(_) => {}
            None => {
                stack.pop();
                if stack.is_empty() {
                    break;
                }
                nodes.pop();
                edges.pop();
            }
        }
    }
    found.sort();
    Ok(found
        .into_iter()
        .map(|(nodes, idx)| {
            let edges: Vec<Edge> = idx.iter().map(|&i| g.edges()[i].clone()).collect();
            let weight = edges.iter().map(|e| e.weight).product();
            PathWeight { nodes, edges, weight }
        })
        .collect())
}

/// Sum of path weights into `intention`; zero when unreachable.
pub fn raw_score(sub: &BehavioralSubgraph, intention: NodeId, max_edges: usize) -> Result<f64, PreferenceError> {
    Ok(enumerate_paths(sub, intention, max_edges)?.iter().map(|p| p.weight).sum())
}

/// Raw scores of every reachable intention, in one depth-first pass.
pub fn intention_scores(sub: &BehavioralSubgraph, max_edges: usize) -> BTreeMap<NodeId, f64> {
    fn walk(
        sub: &BehavioralSubgraph,
        u: NodeId,
        weight: f64,
        remaining: usize,
        on_path: &mut Vec<NodeId>,
        scores: &mut BTreeMap<NodeId, f64>,
    ) {
        if remaining == 0 {
            return;
        }
        let g = sub.graph();
        for (_, e) in g.out_edges(u) {
            if on_path.contains(&e.target) {
                continue;
            }
            let w = weight * e.weight;
            if g.node(e.target).is_some_and(|n| n.kind == NodeKind::Intention) {
                *scores.entry(e.target).or_insert(0.0) += w;
            }
            on_path.push(e.target);
            walk(sub, e.target, w, remaining - 1, on_path, scores);
            on_path.pop();
        }
    }
    let mut scores = BTreeMap::new();
    let mut on_path = vec![sub.agent()];
    walk(sub, sub.agent(), 1.0, max_edges, &mut on_path, &mut scores);
    scores
}

/// Normalized preference over the full option set.
pub fn prior_distribution(
    sub: &BehavioralSubgraph,
    choice_set: &ChoiceCategorySet,
    max_edges: usize,
    epsilon: f64,
) -> PreferenceDistribution {
    let scores = intention_scores(sub, max_edges);
    let raw: Vec<f64> = choice_set
        .options()
        .iter()
        .map(|opt| sub.graph().intention(choice_set.name(), opt).and_then(|id| scores.get(&id).copied()).unwrap_or(0.0))
        .collect();
    PreferenceDistribution::from_scores(choice_set.clone(), &raw, epsilon)
}

/// Probability map over a fixed choice set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDistribution {
    choice_set: ChoiceCategorySet,
    probabilities: Vec<f64>,
    /// Set when every score was zero and the uniform fallback was used.
    degenerate: bool,
}

impl PreferenceDistribution {
    pub fn new(choice_set: ChoiceCategorySet, probabilities: Vec<f64>) -> Result<Self, PreferenceError> {
        if probabilities.len() != choice_set.len() {
            return Err(PreferenceError::LengthMismatch { expected: choice_set.len(), got: probabilities.len() });
        }
        if let Some(&bad) = probabilities.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(PreferenceError::InvalidProbability(bad));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(PreferenceError::NotNormalized(sum));
        }
        Ok(Self { choice_set, probabilities, degenerate: false })
    }

    /// Uniform distribution flagged as degenerate.
    pub fn degenerate_uniform(choice_set: ChoiceCategorySet) -> Self {
        let n = choice_set.len();
        Self { choice_set, probabilities: vec![1.0 / n as f64; n], degenerate: true }
    }

    /// Adds `epsilon` to every score and normalizes; all-zero scores give the
    /// flagged uniform fallback.
    pub fn from_scores(choice_set: ChoiceCategorySet, scores: &[f64], epsilon: f64) -> Self {
        debug_assert_eq!(scores.len(), choice_set.len());
        let smoothed: Vec<f64> = scores.iter().map(|s| s + epsilon).collect();
        let total: f64 = smoothed.iter().sum();
        if !total.is_finite() || total <= 0.0 {
            return Self::degenerate_uniform(choice_set);
        }
        Self { choice_set, probabilities: smoothed.iter().map(|s| s / total).collect(), degenerate: false }
    }

    pub fn choice_set(&self) -> &ChoiceCategorySet {
        &self.choice_set
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn probability(&self, option: &str) -> Option<f64> {
        self.choice_set.index_of(option).map(|i| self.probabilities[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> + '_ {
        self.choice_set.options().iter().map(String::as_str).zip(self.probabilities.iter().copied())
    }

    /// `λ·self + (1-λ)·other`; `other` must share the choice set.
    pub fn blend(&self, other: &PreferenceDistribution, lambda: f64) -> Self {
        debug_assert_eq!(self.choice_set, other.choice_set);
        if lambda == 1.0 {
            return Self { degenerate: false, ..self.clone() };
        }
        let probabilities =
            self.probabilities.iter().zip(&other.probabilities).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
        Self { choice_set: self.choice_set.clone(), probabilities, degenerate: false }
    }

    /// Draws one option.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &str {
        let index = WeightedIndex::new(&self.probabilities).map(|w| w.sample(rng)).unwrap_or(0);
        &self.choice_set.options()[index]
    }

    /// Compact JSON object in option order with shortest round-trip floats.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{");
        for (i, (opt, p)) in self.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&serde_json::to_string(opt).unwrap_or_default());
            out.push(':');
            out.push_str(&serde_json::to_string(&p).unwrap_or_default());
        }
        out.push('}');
        out
    }
}
