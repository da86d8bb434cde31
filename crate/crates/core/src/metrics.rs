//! Group × choice joint distributions, KL divergence and mean absolute error.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Attribute, ChoiceCategorySet, Output, TripRecord};

pub const DEFAULT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples to estimate a joint distribution")]
    EmptySamples,
    #[error("unknown {axis} key {key:?}")]
    UnknownKey { axis: &'static str, key: String },
    #[error("joint distributions have different axes")]
    AxisMismatch,
    #[error("epsilon must be finite and non-negative, got {0}")]
    InvalidEpsilon(f64),
}

/// Row-major matrix of joint probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    groups: Vec<String>,
    choices: ChoiceCategorySet,
    cells: Vec<f64>,
}

impl JointDistribution {
    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn choices(&self) -> &ChoiceCategorySet {
        &self.choices
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn cell(&self, group: &str, choice: &str) -> Option<f64> {
        let g = self.groups.iter().position(|x| x == group)?;
        let c = self.choices.index_of(choice)?;
        Some(self.cells[g * self.choices.len() + c])
    }

    fn same_axes(&self, other: &Self) -> Result<(), MetricsError> {
        if self.groups == other.groups && self.choices == other.choices {
            Ok(())
        } else {
            Err(MetricsError::AxisMismatch)
        }
    }
}

pub fn joint_from_samples<G, C>(
    samples: impl IntoIterator<Item = (G, C)>,
    groups: &[&str],
    choices: &ChoiceCategorySet,
) -> Result<JointDistribution, MetricsError>
where
    G: AsRef<str>,
    C: AsRef<str>,
{
    let width = choices.len();
    let mut counts = vec![0u64; groups.len() * width];
    let mut total = 0u64;
    for (g, c) in samples {
        let (g, c) = (g.as_ref(), c.as_ref());
        let gi = groups
            .iter()
            .position(|x| *x == g)
            .ok_or_else(|| MetricsError::UnknownKey { axis: "group", key: g.to_string() })?;
        let ci = choices.index_of(c).ok_or_else(|| MetricsError::UnknownKey { axis: "choice", key: c.to_string() })?;
        counts[gi * width + ci] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(MetricsError::EmptySamples);
    }
    Ok(JointDistribution {
        groups: groups.iter().map(|g| g.to_string()).collect(),
        choices: choices.clone(),
        cells: counts.iter().map(|&n| n as f64 / total as f64).collect(),
    })
}

/// `Σ P log(P/Q)` in nats after adding `epsilon` to every cell of both
/// joints and renormalizing. Cells where `P` is zero before smoothing
/// contribute nothing.
pub fn kld(p: &JointDistribution, q: &JointDistribution, epsilon: f64) -> Result<f64, MetricsError> {
    p.same_axes(q)?;
    kld_cells(&p.cells, &q.cells, epsilon)
}

/// [`kld`] over two equally long vectors of non-negative masses. Each vector
/// is normalized after smoothing, so raw counts are accepted.
pub fn kld_cells(p: &[f64], q: &[f64], epsilon: f64) -> Result<f64, MetricsError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(MetricsError::AxisMismatch);
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(MetricsError::InvalidEpsilon(epsilon));
    }
    let smooth = |v: &[f64]| {
        let total: f64 = v.iter().map(|c| c + epsilon).sum();
        v.iter().map(|c| (c + epsilon) / total).collect::<Vec<f64>>()
    };
    let (ps, qs) = (smooth(p), smooth(q));
    let mut sum = 0.0;
    for ((raw, pi), qi) in p.iter().zip(&ps).zip(&qs) {
        if *raw > 0.0 {
            sum += pi * libm::log(pi / qi);
        }
    }
    Ok(sum.max(0.0))
}

pub fn mae(p: &JointDistribution, q: &JointDistribution) -> Result<f64, MetricsError> {
    p.same_axes(q)?;
    let total: f64 = p.cells.iter().zip(&q.cells).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / p.cells.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationEntry {
    pub dimension: String,
    pub output: String,
    pub kld: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub entries: Vec<EvaluationEntry>,
    pub mean_kld: f64,
    pub mean_mae: f64,
}

impl EvaluationReport {
    pub fn entry(&self, dimension: &str, output: &str) -> Option<&EvaluationEntry> {
        self.entries.iter().find(|e| e.dimension == dimension && e.output == output)
    }
}

/// Compares the truth population against a simulated one on every
/// (input attribute, output) joint.
pub fn evaluate_populations(
    truth: &[TripRecord],
    simulated: &[TripRecord],
    outputs: &[Output],
    epsilon: f64,
) -> Result<EvaluationReport, MetricsError> {
    let mut entries = Vec::new();
    for &output in outputs {
        let choices = output.choice_set();
        for attribute in Attribute::INPUTS {
            let joint = |records: &[TripRecord]| {
                joint_from_samples(
                    records.iter().map(|r| (r.input(attribute), r.choice(output))),
                    attribute.categories(),
                    &choices,
                )
            };
            let (p, q) = (joint(truth)?, joint(simulated)?);
            entries.push(EvaluationEntry {
                dimension: attribute.name().to_string(),
                output: output.name().to_string(),
                kld: kld(&p, &q, epsilon)?,
                mae: mae(&p, &q)?,
            });
        }
    }
    let n = entries.len().max(1) as f64;
    let mean_kld = entries.iter().map(|e| e.kld).sum::<f64>() / n;
    let mean_mae = entries.iter().map(|e| e.mae).sum::<f64>() / n;
    Ok(EvaluationReport { entries, mean_kld, mean_mae })
}
